"""Synthetic ground-truth flow volumes: the test oracle for the package.

Scenes are built from region layouts (rectangles, ellipses, Voronoi
cells) that partition the grid at every frame, each region driven by a
parametric motion source. Also provides the flow augmentations: global
spline flow addition, frame corruption, and localized temporal jumps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flow_io import FlowVolume, normalized_grid, normalized_times, volume_from_array
from .motion_model import (NUM_QUAD_PARAMS, PolyTimeMotionModel,
                           SplineMotionModel, build_basis, eval_quadratic)


@dataclass(frozen=True)
class RegionSpec:
    """One region of a scene layout.

    shape is "full" (covers everything below later regions), "rect"
    (params x0, y0, x1, y1 inclusive pixel bounds), "ellipse" (params cx,
    cy, rx, ry) or "voronoi" (params cx, cy seed point; all voronoi
    regions compete by distance). velocity translates the shape by
    (vx, vy) pixels per frame. motion is a 12-vector of quadratic
    coefficients, a SplineMotionModel or a PolyTimeMotionModel.
    """

    shape: str
    params: tuple
    motion: object
    velocity: tuple = (0.0, 0.0)


@dataclass(frozen=True)
class SceneSpec:
    width: int
    height: int
    num_frames: int
    regions: tuple
    noise_sigma: float = 0.0
    seed: int = 0

    def __init__(self, width, height, num_frames, regions, noise_sigma=0.0, seed=0):
        regions = tuple(regions)
        if not regions:
            raise ValueError("need at least one region")
        kinds = {r.shape for r in regions}
        if "voronoi" in kinds and kinds != {"voronoi"}:
            raise ValueError("voronoi layouts cannot mix with painted shapes")
        if "voronoi" not in kinds and regions[0].shape != "full":
            raise ValueError("painted layouts need a full first region to cover the grid")
        object.__setattr__(self, "width", int(width))
        object.__setattr__(self, "height", int(height))
        object.__setattr__(self, "num_frames", int(num_frames))
        object.__setattr__(self, "regions", regions)
        object.__setattr__(self, "noise_sigma", float(noise_sigma))
        object.__setattr__(self, "seed", int(seed))


@dataclass
class GeneratedVolume:
    volume: FlowVolume
    gt: list  # per-frame (H, W) int label maps
    true_models: list


def _region_mask(region: RegionSpec, frame0: int, width, height):
    dx = region.velocity[0] * frame0
    dy = region.velocity[1] * frame0
    yy, xx = np.mgrid[0:height, 0:width]
    if region.shape == "full":
        return np.ones((height, width), dtype=bool)
    if region.shape == "rect":
        x0, y0, x1, y1 = region.params
        return ((xx >= x0 + dx) & (xx <= x1 + dx) &
                (yy >= y0 + dy) & (yy <= y1 + dy))
    if region.shape == "ellipse":
        cx, cy, rx, ry = region.params
        return (((xx - cx - dx) / rx) ** 2 + ((yy - cy - dy) / ry) ** 2) <= 1.0
    raise ValueError(f"unknown shape {region.shape!r}")


def _labels_at(spec: SceneSpec, frame0: int) -> np.ndarray:
    h, w = spec.height, spec.width
    if spec.regions[0].shape == "voronoi":
        yy, xx = np.mgrid[0:h, 0:w]
        d2 = np.stack([
            (xx - r.params[0] - r.velocity[0] * frame0) ** 2
            + (yy - r.params[1] - r.velocity[1] * frame0) ** 2
            for r in spec.regions])
        return np.argmin(d2, axis=0)
    labels = np.zeros((h, w), dtype=int)
    for k, region in enumerate(spec.regions[1:], start=1):
        labels[_region_mask(region, frame0, w, h)] = k
    return labels


def _motion_flow(motion, xn, yn, t: int, t_norm: float):
    if isinstance(motion, SplineMotionModel):
        params = motion.basis.frame_weights[t - 1] @ motion.controls
        u, v = eval_quadratic(params, xn, yn)
    elif isinstance(motion, PolyTimeMotionModel):
        u, v = eval_quadratic(motion.params_at(t_norm), xn, yn)
    else:
        coeffs = np.asarray(motion, dtype=np.float64)
        if coeffs.shape != (NUM_QUAD_PARAMS,):
            raise ValueError("constant motion must have 12 coefficients")
        u, v = eval_quadratic(coeffs, xn, yn)
    return u, v


def translation(u: float, v: float) -> np.ndarray:
    """Quadratic coefficients for a pure translation (u, v)."""
    coeffs = np.zeros(NUM_QUAD_PARAMS)
    coeffs[0] = u
    coeffs[3] = v
    return coeffs


def generate(spec: SceneSpec) -> GeneratedVolume:
    """Deterministic scene synthesis: flows are the per-region motion
    evaluated on normalized coordinates plus Gaussian noise."""
    if spec.num_frames < 2:
        raise ValueError("need at least two frames")
    rng = np.random.default_rng(spec.seed)
    xn, yn = normalized_grid(spec.width, spec.height)
    tnorm = normalized_times(spec.num_frames)
    flows = np.zeros((spec.num_frames, spec.height, spec.width, 2))
    gt = []
    for t in range(1, spec.num_frames + 1):
        labels = _labels_at(spec, t - 1)
        gt.append(labels)
        for k, region in enumerate(spec.regions):
            sel = labels == k
            if not sel.any():
                continue
            u, v = _motion_flow(region.motion, xn, yn, t, tnorm[t - 1])
            flows[t - 1, :, :, 0][sel] = np.broadcast_to(u, sel.shape)[sel]
            flows[t - 1, :, :, 1][sel] = np.broadcast_to(v, sel.shape)[sel]
    if spec.noise_sigma > 0:
        flows += spec.noise_sigma * rng.standard_normal(flows.shape)
    return GeneratedVolume(volume=volume_from_array(flows), gt=gt,
                           true_models=[r.motion for r in spec.regions])


def random_spline_model(seed: int, magnitude: float, num_frames: int = 9,
                        nu: int = 3, degree: int = 3) -> SplineMotionModel:
    """Spline model with control coefficients uniform in +-magnitude."""
    rng = np.random.default_rng(seed)
    basis = build_basis(num_frames, nu, degree)
    controls = rng.uniform(-magnitude, magnitude,
                           size=(basis.num_controls, NUM_QUAD_PARAMS))
    return SplineMotionModel(basis=basis, controls=controls)


def add_global_flow(volume: FlowVolume, model: SplineMotionModel) -> FlowVolume:
    """Add one global space-time flow to every frame of the volume."""
    if model.basis.num_frames != volume.num_frames:
        raise ValueError("model and volume frame counts differ")
    arr = volume.array() + model.flow_volume(volume.width, volume.height)
    return volume_from_array(arr)


def corrupted_frame_indices(num_frames: int, count: int, seed: int) -> np.ndarray:
    """The frames (0-based) corrupt_flows touches for a given seed."""
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(num_frames, size=count, replace=False))


def corrupt_flows(volume: FlowVolume, count: int, noise_sigma: float,
                  seed: int) -> FlowVolume:
    """Overlay strong noise on `count` seeded-random frames."""
    if count >= volume.num_frames:
        raise ValueError("cannot corrupt every frame")
    if count == 0:
        return volume
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(volume.num_frames, size=count, replace=False))
    arr = volume.array()
    arr[idx] += noise_sigma * rng.standard_normal(arr[idx].shape)
    return volume_from_array(arr)


def inject_temporal_discontinuity(volume: FlowVolume, sites, t: int,
                                  jump: float) -> FlowVolume:
    """Add a vector of L1 norm `jump` at the given sites of frame t (1-based).

    sites is a boolean (H, W) mask or an iterable of (y, x) pairs.
    """
    if not 1 <= t <= volume.num_frames:
        raise ValueError("frame index out of range")
    arr = volume.array()
    if isinstance(sites, np.ndarray) and sites.dtype == bool:
        if sites.shape != (volume.height, volume.width):
            raise ValueError("site mask shape mismatch")
        sel = sites
    else:
        sel = np.zeros((volume.height, volume.width), dtype=bool)
        for y, x in sites:
            if not (0 <= y < volume.height and 0 <= x < volume.width):
                raise ValueError(f"site ({y}, {x}) out of range")
            sel[y, x] = True
    arr[t - 1, :, :, 0][sel] += jump
    return volume_from_array(arr)


def write_scene_spec(spec: SceneSpec) -> str:
    """Plain-text key=value form; constant-coefficient motions only."""
    lines = [f"width={spec.width}", f"height={spec.height}",
             f"frames={spec.num_frames}", f"noise_sigma={spec.noise_sigma!r}",
             f"seed={spec.seed}"]
    for i, r in enumerate(spec.regions):
        if isinstance(r.motion, (SplineMotionModel, PolyTimeMotionModel)):
            raise ValueError("only constant-coefficient motions serialize to text")
        coeffs = np.asarray(r.motion, dtype=np.float64)
        if coeffs.shape != (NUM_QUAD_PARAMS,):
            raise ValueError("only constant-coefficient motions serialize to text")
        lines.append(f"region.{i}.shape={r.shape}")
        if r.params:
            lines.append(f"region.{i}.params=" + ",".join(repr(float(p)) for p in r.params))
        lines.append(f"region.{i}.velocity={r.velocity[0]!r},{r.velocity[1]!r}")
        lines.append(f"region.{i}.motion=" + ",".join(repr(float(c)) for c in coeffs))
    return "\n".join(lines) + "\n"


def parse_scene_spec(text: str) -> SceneSpec:
    fields = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"malformed line {line!r}")
        fields[key.strip()] = value.strip()
    try:
        width = int(fields["width"])
        height = int(fields["height"])
        frames = int(fields["frames"])
        noise = float(fields.get("noise_sigma", "0"))
        seed = int(fields.get("seed", "0"))
        regions = []
        i = 0
        while f"region.{i}.shape" in fields:
            shape = fields[f"region.{i}.shape"]
            params = tuple(float(x) for x in
                           fields.get(f"region.{i}.params", "").split(",")
                           if x != "")
            velocity = tuple(float(x) for x in
                             fields.get(f"region.{i}.velocity", "0,0").split(","))
            motion = np.array([float(x) for x in
                               fields[f"region.{i}.motion"].split(",")])
            regions.append(RegionSpec(shape=shape, params=params,
                                      motion=motion, velocity=velocity))
            i += 1
    except KeyError as exc:
        raise ValueError(f"missing field {exc}") from exc
    return SceneSpec(width=width, height=height, num_frames=frames,
                     regions=regions, noise_sigma=noise, seed=seed)

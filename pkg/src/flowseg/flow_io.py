"""Optical-flow fields and volumes: .flo I/O, resampling, coordinate
normalization and HSV visualization."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

FLO_MAGIC = 202021.25


class FlowIOError(ValueError):
    """Base class for .flo parsing failures."""


class BadMagic(FlowIOError):
    """File does not start with the Middlebury sanity tag."""


class Truncated(FlowIOError):
    """Payload shorter than the header promises."""


class NonFinite(FlowIOError):
    """Flow data contains NaN or Inf. Rejected, never repaired."""


@dataclass(frozen=True)
class FlowField:
    """Dense 2D displacement field on a W x H grid.

    u and v are (H, W) float32 arrays in pixels/frame, row-major.
    """

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = np.ascontiguousarray(self.u, dtype=np.float32)
        v = np.ascontiguousarray(self.v, dtype=np.float32)
        if u.ndim != 2 or u.shape != v.shape:
            raise ValueError("u and v must be 2D arrays of identical shape")
        if not (np.isfinite(u).all() and np.isfinite(v).all()):
            raise NonFinite("flow field contains non-finite values")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    def array(self) -> np.ndarray:
        """(H, W, 2) float64 view of the field."""
        return np.stack([self.u, self.v], axis=-1).astype(np.float64)


@dataclass(frozen=True)
class FlowVolume:
    """Ordered stack of T >= 2 flow fields with uniform dimensions."""

    frames: tuple

    def __init__(self, frames):
        frames = tuple(frames)
        if len(frames) < 2:
            raise ValueError("a flow volume needs at least two frames")
        w, h = frames[0].width, frames[0].height
        for f in frames[1:]:
            if f.width != w or f.height != h:
                raise ValueError("all frames must share width and height")
        object.__setattr__(self, "frames", frames)

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    @property
    def height(self) -> int:
        return self.frames[0].height

    @property
    def width(self) -> int:
        return self.frames[0].width

    def array(self) -> np.ndarray:
        """(T, H, W, 2) float64 stack."""
        return np.stack([f.array() for f in self.frames], axis=0)


def volume_from_array(arr: np.ndarray) -> FlowVolume:
    """Build a FlowVolume from a (T, H, W, 2) array."""
    arr = np.asarray(arr)
    return FlowVolume([FlowField(arr[t, :, :, 0], arr[t, :, :, 1])
                       for t in range(arr.shape[0])])


def read_flo(path) -> FlowField:
    """Read a Middlebury .flo file (little-endian throughout)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12:
        raise Truncated(f"{path}: header incomplete ({len(data)} bytes)")
    (magic,) = struct.unpack("<f", data[:4])
    if magic != FLO_MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}, expected {FLO_MAGIC}")
    w, h = struct.unpack("<ii", data[4:12])
    if w < 1 or h < 1:
        raise FlowIOError(f"{path}: invalid dimensions {w}x{h}")
    need = 8 * w * h
    payload = data[12:12 + need]
    if len(payload) < need:
        raise Truncated(f"{path}: payload {len(payload)} bytes, need {need}")
    uv = np.frombuffer(payload, dtype="<f4").reshape(h, w, 2)
    if not np.isfinite(uv).all():
        raise NonFinite(f"{path}: flow contains NaN/Inf")
    return FlowField(uv[:, :, 0], uv[:, :, 1])


def write_flo(flow: FlowField, path) -> None:
    """Write a field in Middlebury .flo layout; round-trips bitwise."""
    uv = np.empty((flow.height, flow.width, 2), dtype="<f4")
    uv[:, :, 0] = flow.u
    uv[:, :, 1] = flow.v
    with open(path, "wb") as fh:
        fh.write(struct.pack("<f", FLO_MAGIC))
        fh.write(struct.pack("<ii", flow.width, flow.height))
        fh.write(uv.tobytes())


def resample(flow: FlowField, new_w: int, new_h: int) -> FlowField:
    """Bilinear resampling; displacements are rescaled to new grid units."""
    if new_w < 1 or new_h < 1:
        raise ValueError("target dimensions must be >= 1")
    h, w = flow.height, flow.width
    if (new_w, new_h) == (w, h):
        return flow
    # endpoint-aligned sample positions; a size-1 axis maps to the center
    ys = np.linspace(0.0, h - 1.0, new_h) if new_h > 1 else np.array([(h - 1) / 2.0])
    xs = np.linspace(0.0, w - 1.0, new_w) if new_w > 1 else np.array([(w - 1) / 2.0])
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    coords = np.stack([yy.ravel(), xx.ravel()])
    su, sv = new_w / w, new_h / h
    u = ndimage.map_coordinates(flow.u.astype(np.float64), coords, order=1,
                                mode="nearest").reshape(new_h, new_w) * su
    v = ndimage.map_coordinates(flow.v.astype(np.float64), coords, order=1,
                                mode="nearest").reshape(new_h, new_w) * sv
    return FlowField(u.astype(np.float32), v.astype(np.float32))


def resample_volume(volume: FlowVolume, new_w: int, new_h: int) -> FlowVolume:
    return FlowVolume([resample(f, new_w, new_h) for f in volume.frames])


def _axis_norm(p, n):
    if n == 1:
        return np.zeros_like(np.asarray(p, dtype=np.float64))
    return 2.0 * np.asarray(p, dtype=np.float64) / (n - 1) - 1.0


def normalize_coords(x, y, t, width, height, num_frames):
    """Map pixel (x, y) and frame index t (1-based) into [-1, 1]^3.

    Endpoints map exactly: pixel 0 -> -1, pixel W-1 -> +1, frame 1 -> -1,
    frame T -> +1. Degenerate axes (W=1 or T=1) map to 0.
    """
    x, y, t = np.asarray(x), np.asarray(y), np.asarray(t)
    if np.any(x < 0) or np.any(x > width - 1):
        raise ValueError("x out of range")
    if np.any(y < 0) or np.any(y > height - 1):
        raise ValueError("y out of range")
    if np.any(t < 1) or np.any(t > num_frames):
        raise ValueError("t out of range")
    return _axis_norm(x, width), _axis_norm(y, height), _axis_norm(t - 1, num_frames)


def normalized_grid(width: int, height: int):
    """Per-pixel normalized coordinates, each (H, W)."""
    xn = _axis_norm(np.arange(width), width)
    yn = _axis_norm(np.arange(height), height)
    return np.meshgrid(xn, yn, indexing="xy")


def normalized_times(num_frames: int) -> np.ndarray:
    """Normalized time for frames 1..T, shape (T,)."""
    return _axis_norm(np.arange(num_frames), num_frames)


def _hsv_to_rgb(h, s, v):
    # vectorized standard conversion, all inputs in [0, 1]
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def flow_to_hsv(flow: FlowField, normalization: str = "per-frame",
                volume_max: float | None = None) -> np.ndarray:
    """Render a flow field with the HSV color code, uint8 (H, W, 3).

    Hue encodes direction, saturation encodes magnitude; zero flow is white.
    normalization is "per-frame" (default) or "per-volume-max", the latter
    requiring volume_max (largest magnitude over the whole volume).
    """
    u = flow.u.astype(np.float64)
    v = flow.v.astype(np.float64)
    mag = np.hypot(u, v)
    if normalization == "per-frame":
        scale = mag.max()
    elif normalization == "per-volume-max":
        if volume_max is None:
            raise ValueError("per-volume-max normalization needs volume_max")
        scale = float(volume_max)
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    sat = mag / scale if scale > 0 else np.zeros_like(mag)
    hue = (np.arctan2(-v, -u) / (2 * np.pi) + 0.5) % 1.0
    rgb = _hsv_to_rgb(hue, np.clip(sat, 0.0, 1.0), np.ones_like(sat))
    return (rgb * 255.0 + 0.5).astype(np.uint8)


def volume_max_magnitude(volume: FlowVolume) -> float:
    arr = volume.array()
    return float(np.hypot(arr[..., 0], arr[..., 1]).max())

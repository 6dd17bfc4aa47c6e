"""Alternating minimization of the segmentation loss.

The loss couples a flow-reconstruction term (weighted L1 residuals against
per-segment space-time motion models, normalized by per-frame flow
magnitude) with a temporal-consistency term on the soft segmentation,
skipping sites whose temporal flow difference falls in the top quantile
(likely occlusions). Segmentation probabilities are the softmax of free
per-site logits, optimized by backtracking gradient steps; motion models
are refit exactly in between (the problem is convex in the models).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .flow_io import FlowVolume
from .motion_model import (DegenerateSupport, build_basis, fit_polytime_model,
                           fit_spline_model)

XI_EPS = 1e-8  # guards all-zero frames in the magnitude normalization


@dataclass(frozen=True)
class SegmenterConfig:
    num_segments: int = 2
    nu: int = 3
    degree: int = 3
    gamma: float = 1.0
    eta: float = 0.01
    outer_iters: int = 40
    inner_g_steps: int = 10
    g_step: float = 1.0
    seed: int = 0
    init: str = "kmeans"  # "random" | "kmeans"
    loss_variant: str = "main"  # "main" | "alternate" | "no_consistency"
    gamma1: float = 0.5
    gamma2: float = 0.01
    model_family: str = "spline"  # "spline" | "polytime"

    def __post_init__(self):
        if self.num_segments < 2:
            raise ValueError("need at least two segments")
        if self.gamma < 0:
            raise ValueError("consistency weight must be nonnegative")
        if not 0.0 <= self.eta < 0.5:
            raise ValueError("occlusion quantile must be in [0, 0.5)")
        if self.init not in ("random", "kmeans"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.loss_variant not in ("main", "alternate", "no_consistency"):
            raise ValueError(f"unknown loss variant {self.loss_variant!r}")
        if self.model_family not in ("spline", "polytime"):
            raise ValueError(f"unknown model family {self.model_family!r}")


@dataclass(frozen=True)
class LossBreakdown:
    reconstruction: float
    consistency: float
    total: float


@dataclass
class SegmentationResult:
    soft: np.ndarray  # (K, T, H, W), columns sum to 1
    models: list
    trace: list
    occlusion: np.ndarray  # (T-1, H, W) bool, True = excluded pair
    occlusion_threshold: float
    warnings: list = field(default_factory=list)


def _as_array(volume):
    return volume if isinstance(volume, np.ndarray) else volume.array()


def frame_magnitudes(flows: np.ndarray) -> np.ndarray:
    """Per-frame L1 flow mass plus a small epsilon, shape (T,)."""
    return np.abs(flows).sum(axis=(1, 2, 3)) + XI_EPS


def softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax over the segment axis (axis 0)."""
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def model_residuals(flows: np.ndarray, models, xi: np.ndarray | None = None) -> np.ndarray:
    """Normalized L1 residual of each model, (K, T, H, W)."""
    if xi is None:
        xi = frame_magnitudes(flows)
    res = np.empty((len(models),) + flows.shape[:3])
    for k, model in enumerate(models):
        pred = model.flow_volume(flows.shape[2], flows.shape[1])
        res[k] = np.abs(flows - pred).sum(axis=-1) / xi[:, None, None]
    return res


def reconstruction_loss(volume, g: np.ndarray, models) -> float:
    """sum_{t,i,k} g * |f - model_k| / xi_t."""
    flows = _as_array(volume)
    if g.shape[1:] != flows.shape[:3]:
        raise ValueError("segmentation shape does not match the volume")
    return float(np.sum(g * model_residuals(flows, models)))


def occlusion_threshold(volume, eta: float):
    """Quantile threshold on temporal flow differences and exclusion mask.

    Returns (lam, mask) where lam is the nearest-rank (1-eta) quantile of
    |f(i,t) - f(i,t-1)|_1 pooled over all sites and frame pairs, and mask
    is (T-1, H, W) bool marking pairs strictly above lam.
    """
    flows = _as_array(volume)
    if flows.shape[0] < 2:
        raise ValueError("need at least two frames")
    diffs = np.abs(flows[1:] - flows[:-1]).sum(axis=-1)  # (T-1, H, W)
    pooled = np.sort(diffs.ravel())
    n = pooled.size
    rank = int(np.ceil((1.0 - eta) * n))  # nearest-rank, 1-based
    rank = min(max(rank, 1), n)
    lam = float(pooled[rank - 1])
    return lam, diffs > lam


def consistency_loss(g: np.ndarray, mask: np.ndarray) -> float:
    """Mean absolute temporal variation of g over non-excluded pairs."""
    k, t, h, w = g.shape
    if mask.shape != (t - 1, h, w):
        raise ValueError("mask shape does not match the segmentation")
    diffs = np.abs(g[:, 1:] - g[:, :-1])
    return float((diffs * ~mask).sum() / (2.0 * k * h * w))


def total_loss(volume, g: np.ndarray, models, config: SegmenterConfig,
               mask: np.ndarray | None = None) -> LossBreakdown:
    """Reconstruction plus weighted consistency; gamma=0 for no_consistency."""
    flows = _as_array(volume)
    if mask is None:
        _, mask = occlusion_threshold(flows, config.eta)
    l_r = reconstruction_loss(flows, g, models)
    l_c = consistency_loss(g, mask)
    gamma = 0.0 if config.loss_variant == "no_consistency" else config.gamma
    return LossBreakdown(reconstruction=l_r, consistency=l_c,
                         total=l_r + gamma * l_c)


def alternate_total_loss(volume, g: np.ndarray, models, gamma1: float,
                         gamma2: float, mask: np.ndarray | None = None) -> float:
    """Variant without the absolute-difference bound: reconstruction minus a
    temporal dot-product reward plus an entropy penalty (0*log 0 := 0).

    The occlusion mask, when given, also excludes pairs from the
    dot-product term.
    """
    flows = _as_array(volume)
    l_r = reconstruction_loss(flows, g, models)
    prod = g[:, 1:] * g[:, :-1]
    if mask is not None:
        prod = prod * (~mask)[None]
    dot = float(prod.sum())
    with np.errstate(divide="ignore", invalid="ignore"):
        glogg = np.where(g > 0, g * np.log(np.where(g > 0, g, 1.0)), 0.0)
    ent = float(glogg.sum())
    return l_r - gamma1 * dot + gamma2 * ent


def _loss_given_residuals(g, residuals, mask, config):
    """Total loss with models held fixed (residuals precomputed)."""
    l_r = float(np.sum(g * residuals))
    if config.loss_variant == "alternate":
        prod = (g[:, 1:] * g[:, :-1]) * (~mask)[None]
        with np.errstate(divide="ignore", invalid="ignore"):
            glogg = np.where(g > 0, g * np.log(np.where(g > 0, g, 1.0)), 0.0)
        return l_r - config.gamma1 * float(prod.sum()) + config.gamma2 * float(glogg.sum())
    gamma = 0.0 if config.loss_variant == "no_consistency" else config.gamma
    return l_r + gamma * consistency_loss(g, mask)


def _loss_grad_wrt_g(g, residuals, mask, config):
    grad = residuals.copy()
    k, t, h, w = g.shape
    keep = (~mask)[None].astype(np.float64)
    if config.loss_variant == "alternate":
        grad[:, 1:] -= config.gamma1 * g[:, :-1] * keep
        grad[:, :-1] -= config.gamma1 * g[:, 1:] * keep
        with np.errstate(divide="ignore"):
            logg = np.where(g > 0, np.log(np.where(g > 0, g, 1.0)), 0.0)
        grad += config.gamma2 * (logg + 1.0)
        return grad
    gamma = 0.0 if config.loss_variant == "no_consistency" else config.gamma
    if gamma > 0:
        scale = gamma / (2.0 * k * h * w)
        s = np.sign(g[:, 1:] - g[:, :-1]) * keep  # sign(0) = 0 at kinks
        grad[:, 1:] += scale * s
        grad[:, :-1] -= scale * s
    return grad


def loss_gradient_logits(g: np.ndarray, residuals: np.ndarray,
                         mask: np.ndarray, config: SegmenterConfig) -> np.ndarray:
    """Analytic gradient of the total loss with respect to the logits."""
    dg = _loss_grad_wrt_g(g, residuals, mask, config)
    inner = (dg * g).sum(axis=0, keepdims=True)
    return g * (dg - inner)


def update_segmentation(volume, logits: np.ndarray, models,
                        mask: np.ndarray, config: SegmenterConfig,
                        residuals: np.ndarray | None = None) -> np.ndarray:
    """One backtracking gradient step on the logits; never increases the loss."""
    flows = _as_array(volume)
    if residuals is None:
        residuals = model_residuals(flows, models)
    return _g_step(logits, residuals, mask, config)


def _g_step(logits, residuals, mask, config, max_halvings: int = 20):
    g = softmax(logits)
    loss0 = _loss_given_residuals(g, residuals, mask, config)
    grad = loss_gradient_logits(g, residuals, mask, config)
    gmax = np.abs(grad).max()
    if gmax == 0.0:
        return logits
    # steepest descent with the step measured in logit units: the raw
    # gradient scale varies with xi and |Omega|, the argmax geometry does not
    direction = grad / gmax
    step = config.g_step
    for _ in range(max_halvings + 1):
        candidate = logits - step * direction
        loss = _loss_given_residuals(softmax(candidate), residuals, mask, config)
        if loss <= loss0:
            return candidate
        step *= 0.5
    return logits


def hard_labels(soft: np.ndarray) -> np.ndarray:
    """Argmax over segments, ties broken by the lowest segment index."""
    return np.argmax(soft, axis=0)


def background_label(labels: np.ndarray) -> int:
    """Most populous label over the whole volume; ties go to the lowest."""
    counts = np.bincount(np.asarray(labels).ravel())
    return int(np.argmax(counts))


def _kmeans_flow_labels(flows: np.ndarray, k: int, rng: np.random.Generator,
                        iters: int = 25) -> np.ndarray:
    """Seeded Lloyd k-means on per-site flow vectors, labels (T, H, W)."""
    pts = flows.reshape(-1, 2)
    # k-means++ style seeding for stable, well-spread centers
    centers = np.empty((k, 2))
    centers[0] = pts[rng.integers(len(pts))]
    for j in range(1, k):
        d2 = np.min(((pts[:, None, :] - centers[None, :j, :]) ** 2).sum(-1), axis=1)
        tot = d2.sum()
        if tot <= 0:
            centers[j] = pts[rng.integers(len(pts))]
            continue
        centers[j] = pts[np.searchsorted(np.cumsum(d2 / tot), rng.random())]
    labels = None
    for _ in range(iters):
        d2 = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        new_labels = np.argmin(d2, axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            sel = labels == j
            if sel.any():
                centers[j] = pts[sel].mean(axis=0)
    return labels.reshape(flows.shape[:3])


def _init_logits(flows: np.ndarray, config: SegmenterConfig) -> np.ndarray:
    rng = np.random.default_rng(config.seed)
    shape = (config.num_segments,) + flows.shape[:3]
    if config.init == "random":
        return 0.1 * rng.standard_normal(shape)
    labels = _kmeans_flow_labels(flows, config.num_segments, rng)
    logits = 0.01 * rng.standard_normal(shape)
    for k in range(config.num_segments):
        logits[k][labels == k] += 3.0
    return logits


def _fit_segment_model(flows, weights, basis, config, init):
    if config.model_family == "polytime":
        # cached controls are stored time-linear (Lt, 12); coeffs are (12, Lt)
        return fit_polytime_model(flows, weights,
                                  init=None if init is None else init.T)
    return fit_spline_model(flows, weights, basis, init=init)


def segment(volume, config: SegmenterConfig) -> SegmentationResult:
    """Alternating optimization: exact model refits and logit gradient steps.

    Deterministic given (volume, config); the recorded loss trace is
    non-increasing. Segments whose soft mass vanishes keep their last model
    (frozen) and are reported in result.warnings.
    """
    flows = _as_array(volume)
    if isinstance(volume, FlowVolume) and volume.num_frames < 2:
        raise ValueError("need at least two frames")
    T, H, W, _ = flows.shape
    k = config.num_segments
    xi = frame_magnitudes(flows)
    lam, mask = occlusion_threshold(flows, config.eta)
    basis = build_basis(T, config.nu, config.degree)
    logits = _init_logits(flows, config)
    g = softmax(logits)

    models = [None] * k
    controls = [None] * k
    residuals = None
    notes = []
    trace = []
    for _ in range(config.outer_iters):
        # model step: exact (convex) refit per segment, kept only if it
        # does not worsen that segment's weighted residual under current g
        for s in range(k):
            weights = g[s] / xi[:, None, None]
            try:
                fitted = _fit_segment_model(flows, weights, basis, config, controls[s])
            except DegenerateSupport:
                if models[s] is None:
                    fitted = _fit_segment_model(
                        flows, np.full((T, H, W), 1.0 / (T * H * W)), basis, config, None)
                    models[s] = fitted
                    controls[s] = _model_controls(fitted)
                note = f"segment {s}: empty support, model frozen"
                if note not in notes:
                    notes.append(note)
                continue
            pred = fitted.flow_volume(W, H)
            new_recon = float(np.sum(weights * np.abs(flows - pred).sum(axis=-1)))
            if models[s] is None or new_recon <= _segment_recon(flows, weights, models[s], W, H):
                models[s] = fitted
                controls[s] = _model_controls(fitted)
        residuals = model_residuals(flows, models, xi)
        # segmentation step: several backtracking gradient moves on the logits
        for _ in range(config.inner_g_steps):
            logits = _g_step(logits, residuals, mask, config)
        g = softmax(logits)
        trace.append(_breakdown(g, residuals, mask, config))

    if notes:
        for note in notes:
            warnings.warn(note, RuntimeWarning, stacklevel=2)
    return SegmentationResult(soft=g, models=models, trace=trace,
                              occlusion=mask, occlusion_threshold=lam,
                              warnings=notes)


def _model_controls(model):
    return model.controls.copy() if hasattr(model, "controls") else model.coeffs.T.copy()


def _segment_recon(flows, weights, model, width, height):
    pred = model.flow_volume(width, height)
    return float(np.sum(weights * np.abs(flows - pred).sum(axis=-1)))


def _breakdown(g, residuals, mask, config) -> LossBreakdown:
    l_r = float(np.sum(g * residuals))
    l_c = consistency_loss(g, mask)
    if config.loss_variant == "alternate":
        total = _loss_given_residuals(g, residuals, mask, config)
    else:
        gamma = 0.0 if config.loss_variant == "no_consistency" else config.gamma
        total = l_r + gamma * l_c
    return LossBreakdown(reconstruction=l_r, consistency=l_c, total=total)

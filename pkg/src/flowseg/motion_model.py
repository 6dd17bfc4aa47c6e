"""Segment-wise space-time parametric motion models.

Spatially each model is a 12-coefficient full quadratic in normalized
(x, y); over time the coefficients follow either a clamped B-spline
(default) or a low-order polynomial (ablation variant). Fitting is a
weighted L1 regression solved by IRLS, which is convex because the model
is linear in the control parameters.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .flow_io import normalized_grid, normalized_times

NUM_QUAD_PARAMS = 12


class DegenerateSupport(ValueError):
    """Total fitting weight is (numerically) zero."""


def quad_design(xn, yn) -> np.ndarray:
    """Monomial design [1, x, y, x^2, xy, y^2] at normalized coords.

    Returns (..., 6) for broadcast inputs.
    """
    xn, yn = np.broadcast_arrays(np.asarray(xn, dtype=np.float64),
                                 np.asarray(yn, dtype=np.float64))
    one = np.ones_like(xn)
    return np.stack([one, xn, yn, xn * xn, xn * yn, yn * yn], axis=-1)


def eval_quadratic(params, xn, yn):
    """Evaluate the 12-parameter quadratic flow model.

    params holds (theta1..theta12); theta1-3 and theta7-9 generate u,
    theta4-6 and theta10-12 generate v. Returns (u, v) broadcast over the
    coordinate arrays.
    """
    p = np.asarray(params, dtype=np.float64)
    if p.shape[-1] != NUM_QUAD_PARAMS:
        raise ValueError("expected 12 coefficients")
    m = quad_design(xn, yn)
    cu = p[..., [0, 1, 2, 6, 7, 8]]
    cv = p[..., [3, 4, 5, 9, 10, 11]]
    return m @ cu, m @ cv


def control_point_count(num_frames: int, nu: int) -> int:
    """L = 2 + floor((T - 2) / nu); endpoints always carry a control point."""
    if num_frames < 2:
        raise ValueError("need at least two frames")
    if nu < 1:
        raise ValueError("frequency factor must be >= 1")
    return 2 + (num_frames - 2) // nu


def uniform_clamped_knots(num_controls: int, degree: int) -> np.ndarray:
    """Clamped knot vector on [-1, 1] with uniformly spaced interior knots."""
    if num_controls < degree + 1:
        raise ValueError("need at least degree+1 control points")
    interior = np.linspace(-1.0, 1.0, num_controls - degree + 1)[1:-1]
    return np.concatenate([np.full(degree + 1, -1.0), interior,
                           np.full(degree + 1, 1.0)])


def bspline_weights(knots: np.ndarray, degree: int, t) -> np.ndarray:
    """Cox-de Boor basis weights at normalized times t, shape (len(t), L)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    num_controls = len(knots) - degree - 1
    # locate the knot span; the right domain endpoint folds into the last span
    spans = np.searchsorted(knots, t, side="right") - 1
    spans = np.clip(spans, degree, num_controls - 1)
    # triangular recursion over the degree+1 weights active in each span
    b = np.zeros((t.size, degree + 1))
    b[:, 0] = 1.0
    left = np.zeros((t.size, degree + 1))
    right = np.zeros((t.size, degree + 1))
    for j in range(1, degree + 1):
        left[:, j] = t - knots[spans + 1 - j]
        right[:, j] = knots[spans + j] - t
        saved = np.zeros(t.size)
        for r in range(j):
            denom = right[:, r + 1] + left[:, j - r]
            temp = np.where(denom != 0.0,
                            b[:, r] / np.where(denom != 0.0, denom, 1.0), 0.0)
            b[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        b[:, j] = saved
    weights = np.zeros((t.size, num_controls))
    rows = np.arange(t.size)[:, None]
    cols = spans[:, None] - degree + np.arange(degree + 1)[None, :]
    weights[rows, cols] = np.maximum(b, 0.0)
    return weights


@dataclass(frozen=True)
class SplineBasis:
    """Clamped B-spline basis cached on the frame grid.

    frame_weights is (T, L): the basis evaluated at the normalized time of
    every frame. Rows sum to 1 (partition of unity) and are nonnegative.
    """

    degree: int
    knots: np.ndarray
    num_controls: int
    num_frames: int
    frame_weights: np.ndarray

    def weights_at(self, t_norm) -> np.ndarray:
        """Basis weights at arbitrary normalized times, (len(t), L)."""
        return bspline_weights(self.knots, self.degree, t_norm)


def build_basis(num_frames: int, nu: int = 3, degree_request: int = 3) -> SplineBasis:
    """Basis for a T-frame volume; effective degree is min(request, L-1)."""
    num_controls = control_point_count(num_frames, nu)
    degree = min(degree_request, num_controls - 1)
    knots = uniform_clamped_knots(num_controls, degree)
    frame_weights = bspline_weights(knots, degree, normalized_times(num_frames))
    return SplineBasis(degree=degree, knots=knots, num_controls=num_controls,
                       num_frames=num_frames, frame_weights=frame_weights)


@dataclass
class SplineMotionModel:
    """One quadratic parameter set per spline control point."""

    basis: SplineBasis
    controls: np.ndarray  # (L, 12)
    singular: bool = False  # fit hit a rank-deficient system (min-norm result)

    def __post_init__(self):
        self.controls = np.asarray(self.controls, dtype=np.float64)
        if self.controls.shape != (self.basis.num_controls, NUM_QUAD_PARAMS):
            raise ValueError("controls must be (L, 12)")
        if not np.isfinite(self.controls).all():
            raise ValueError("controls must be finite")

    def params_at_frame(self, t: int) -> np.ndarray:
        """Effective quadratic coefficients at frame t (1-based)."""
        return self.basis.frame_weights[t - 1] @ self.controls

    def flow_volume(self, width: int, height: int) -> np.ndarray:
        """Model flow on the full grid, (T, H, W, 2)."""
        xn, yn = normalized_grid(width, height)
        m = quad_design(xn, yn)  # (H, W, 6)
        params = self.basis.frame_weights @ self.controls  # (T, 12)
        cu = params[:, [0, 1, 2, 6, 7, 8]]
        cv = params[:, [3, 4, 5, 9, 10, 11]]
        u = np.einsum("hwj,tj->thw", m, cu)
        v = np.einsum("hwj,tj->thw", m, cv)
        return np.stack([u, v], axis=-1)


def eval_spline_flow(model: SplineMotionModel, xn, yn, t: int):
    """Flow of the spline model at frame t (1-based) and normalized coords."""
    if not 1 <= t <= model.basis.num_frames:
        raise ValueError("frame index out of range")
    return eval_quadratic(model.params_at_frame(t), xn, yn)


@dataclass
class PolyTimeMotionModel:
    """Ablation variant: each quadratic coefficient is a polynomial in t'.

    coeffs is (12, deg_t+1) ordered [const, t', t'^2, ...], degree <= 2.
    """

    coeffs: np.ndarray
    num_frames: int
    singular: bool = False

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.coeffs.ndim != 2 or self.coeffs.shape[0] != NUM_QUAD_PARAMS:
            raise ValueError("coeffs must be (12, deg_t+1)")
        if self.coeffs.shape[1] > 3:
            raise ValueError("temporal degree is at most 2")
        if not np.isfinite(self.coeffs).all():
            raise ValueError("coeffs must be finite")

    def params_at(self, t_norm: float) -> np.ndarray:
        powers = np.power(float(t_norm), np.arange(self.coeffs.shape[1]))
        return self.coeffs @ powers

    def flow_volume(self, width: int, height: int) -> np.ndarray:
        xn, yn = normalized_grid(width, height)
        m = quad_design(xn, yn)
        tnorm = normalized_times(self.num_frames)
        tdesign = np.power(tnorm[:, None], np.arange(self.coeffs.shape[1])[None, :])
        params = tdesign @ self.coeffs.T  # (T, 12)
        cu = params[:, [0, 1, 2, 6, 7, 8]]
        cv = params[:, [3, 4, 5, 9, 10, 11]]
        u = np.einsum("hwj,tj->thw", m, cu)
        v = np.einsum("hwj,tj->thw", m, cv)
        return np.stack([u, v], axis=-1)


def eval_polytime_flow(model: PolyTimeMotionModel, xn, yn, t_norm: float):
    """Evaluate the polynomial-in-time variant at normalized time t'."""
    return eval_quadratic(model.params_at(t_norm), xn, yn)


def _solve_normal(normal: np.ndarray, rhs: np.ndarray):
    """Solve the normal equations; min-norm fallback on rank deficiency."""
    try:
        sol = np.linalg.solve(normal, rhs)
        if np.isfinite(sol).all():
            return sol, False
    except np.linalg.LinAlgError:
        pass
    return np.linalg.pinv(normal, hermitian=True) @ rhs, True


def fit_time_linear(flows: np.ndarray, weights: np.ndarray,
                    time_design: np.ndarray, init: np.ndarray | None = None,
                    smooth_eps: float = 1e-6, max_iters: int = 50,
                    tol: float = 1e-7):
    """Weighted-L1 fit of a time-linear quadratic motion model.

    flows is (T, H, W, 2), weights (T, H, W) nonnegative, time_design
    (T, Lt). Minimizes sum w * (|r_u| + |r_v|) over controls (Lt, 12) by
    IRLS with |r| smoothed as sqrt(r^2 + eps^2). Returns (controls,
    singular, objective_trace). The objective trace is non-increasing.
    """
    T, H, W, _ = flows.shape
    n = H * W
    if weights.shape != (T, H, W):
        raise ValueError("weights shape must match the volume")
    total_w = float(weights.sum())
    if total_w <= 1e-12:
        raise DegenerateSupport("total fitting weight is zero")
    lt = time_design.shape[1]
    xn, yn = normalized_grid(W, H)
    m = quad_design(xn, yn).reshape(n, 6)  # (N, 6)
    wts = weights.reshape(T, n).astype(np.float64)
    obs = flows.reshape(T, n, 2).astype(np.float64)
    b = time_design  # (T, Lt)
    cols_u = [0, 1, 2, 6, 7, 8]
    cols_v = [3, 4, 5, 9, 10, 11]

    if init is not None:
        controls = np.array(init, dtype=np.float64)
        if controls.shape != (lt, NUM_QUAD_PARAMS):
            raise ValueError("init must be (Lt, 12)")
    else:
        controls = np.zeros((lt, NUM_QUAD_PARAMS))

    def predict(ctrl):
        params = b @ ctrl  # (T, 12)
        pu = params[:, cols_u] @ m.T
        pv = params[:, cols_v] @ m.T
        return pu, pv

    def smoothed_objective(ctrl):
        pu, pv = predict(ctrl)
        ru = obs[:, :, 0] - pu
        rv = obs[:, :, 1] - pv
        return float(np.sum(wts * (np.sqrt(ru * ru + smooth_eps ** 2)
                                   + np.sqrt(rv * rv + smooth_eps ** 2))))

    singular = False
    trace = [smoothed_objective(controls)]
    for _ in range(max_iters):
        pu, pv = predict(controls)
        new = controls.copy()
        for comp, pred, cols in ((0, pu, cols_u), (1, pv, cols_v)):
            r = obs[:, :, comp] - pred
            irls_w = wts / np.sqrt(r * r + smooth_eps ** 2)  # (T, N)
            # normal matrix via the Kronecker structure A[(t,i),(l,j)] = B[t,l] M[i,j]
            gram = np.matmul(m.T[None] * irls_w[:, None, :], m)  # (T, 6, 6)
            normal = np.einsum("tl,tp,tjk->ljpk", b, b, gram).reshape(6 * lt, 6 * lt)
            rhs = (b.T @ ((irls_w * obs[:, :, comp]) @ m)).reshape(6 * lt)
            sol, sing = _solve_normal(normal, rhs)
            singular = singular or sing
            new[:, cols] = sol.reshape(lt, 6)
        obj = smoothed_objective(new)
        if obj <= trace[-1]:
            controls = new
        else:  # MM guarantee can be broken by the min-norm fallback; keep the better point
            obj = trace[-1]
        converged = abs(trace[-1] - obj) <= tol * max(abs(trace[-1]), 1e-30)
        trace.append(obj)
        if converged:
            break
    return controls, singular, trace


def fit_spline_model(volume, weights: np.ndarray, basis: SplineBasis,
                     init: np.ndarray | None = None, **irls_opts) -> SplineMotionModel:
    """Fit a SplineMotionModel to a volume under per-site weights.

    volume is a FlowVolume or a (T, H, W, 2) array. Any loss normalization
    (such as per-frame flow magnitude) must already be folded into weights.
    Raises DegenerateSupport when the weights carry no mass; rank-deficient
    systems get the minimum-norm solution with model.singular set.
    """
    flows = volume if isinstance(volume, np.ndarray) else volume.array()
    if flows.shape[0] != basis.num_frames:
        raise ValueError("basis frame count does not match the volume")
    controls, singular, _ = fit_time_linear(flows, weights, basis.frame_weights,
                                            init=init, **irls_opts)
    return SplineMotionModel(basis=basis, controls=controls, singular=singular)


def fit_polytime_model(volume, weights: np.ndarray, time_degree: int = 2,
                       init: np.ndarray | None = None,
                       **irls_opts) -> PolyTimeMotionModel:
    """Fit the polynomial-in-time ablation model (same IRLS machinery)."""
    flows = volume if isinstance(volume, np.ndarray) else volume.array()
    T = flows.shape[0]
    tnorm = normalized_times(T)
    tdesign = np.power(tnorm[:, None], np.arange(time_degree + 1)[None, :])
    controls, singular, _ = fit_time_linear(flows, weights, tdesign,
                                            init=None if init is None else init.T,
                                            **irls_opts)
    return PolyTimeMotionModel(coeffs=controls.T, num_frames=T, singular=singular)


def serialize_model(model: SplineMotionModel) -> str:
    """Plain-text key=value dump for reproducibility."""
    out = io.StringIO()
    out.write("kind=spline\n")
    out.write(f"degree={model.basis.degree}\n")
    out.write(f"frames={model.basis.num_frames}\n")
    out.write(f"controls={model.basis.num_controls}\n")
    out.write("knots=" + ",".join(repr(float(k)) for k in model.basis.knots) + "\n")
    for l in range(model.basis.num_controls):
        vals = ",".join(repr(float(c)) for c in model.controls[l])
        out.write(f"control.{l}={vals}\n")
    return out.getvalue()


def deserialize_model(text: str) -> SplineMotionModel:
    fields = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    if fields.get("kind") != "spline":
        raise ValueError("unsupported model kind")
    degree = int(fields["degree"])
    num_frames = int(fields["frames"])
    num_controls = int(fields["controls"])
    knots = np.array([float(x) for x in fields["knots"].split(",")])
    frame_weights = bspline_weights(knots, degree, normalized_times(num_frames))
    basis = SplineBasis(degree=degree, knots=knots, num_controls=num_controls,
                        num_frames=num_frames, frame_weights=frame_weights)
    controls = np.array([[float(x) for x in fields[f"control.{l}"].split(",")]
                         for l in range(num_controls)])
    return SplineMotionModel(basis=basis, controls=controls)

"""Geometric mine-laying patterns fitted per cluster.

Two pattern families:

* LinearPattern — the first principal component of the cluster. Points are
  re-expressed as progress gamma (distance of the orthogonal projection to
  the cluster center along the line) and distance delta (point to line),
  both in un-squared Euclidean meters.

* CurvedPattern — a self-consistent smooth curve obtained by iterating
  projection / smoothing-spline conditional expectation / unit-speed
  reparameterization, starting from the first principal component. The
  fitted curve is kept as a unit-speed polyline (1 m arc steps). Transforms
  are approximated through anchor points spaced 25 m in arc length along
  the curve (extrapolated past the fitted arc by its end tangents), so
  delta is the distance to the nearest anchor and gamma the chordal arc
  length from the center anchor to it.

The objective D(X, f) monitored during iteration is the mean squared
distance of the cluster points to the curve. The iteration is not
guaranteed to converge; it is capped and the result flagged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.interpolate import UnivariateSpline

from .clustering import Cluster

DEFAULT_ANCHOR_SPACING = 25.0
TRAINING_ANCHOR_EXTENT = 1000.0
RISK_EXTENT_THRESHOLD = 0.05
RESAMPLE_STEP = 1.0  # meters; unit-speed polyline resolution


class DegenerateClusterError(ValueError):
    """All cluster points coincide; no direction can be fitted."""


@dataclass(frozen=True)
class PatternCoordinates:
    gamma: float  # progress along the pattern from the cluster center, meters
    delta: float  # distance from the point to its projection, meters


@dataclass(frozen=True)
class LinearPattern:
    center: np.ndarray  # (2,) cluster centroid
    direction: np.ndarray  # (2,) unit vector, non-negative x (ties: non-negative y)


@dataclass(frozen=True)
class PatternFitConfig:
    pc_smoothness_factor: float = 10.0  # max point-to-curve distance, meters
    max_spline_degree: int = 2
    convergence_threshold: float = 1e-3  # relative change in D
    max_iterations: int = 50

    def __post_init__(self):
        if self.pc_smoothness_factor <= 0:
            raise ValueError("pc_smoothness_factor must be positive")
        if self.max_spline_degree < 1:
            raise ValueError("max_spline_degree must be >= 1")
        if self.convergence_threshold <= 0 or self.max_iterations <= 0:
            raise ValueError("convergence settings must be positive")


@dataclass
class CurvedPattern:
    knots_lambda: np.ndarray  # (m,) arc length, knots_lambda[0] == 0, strictly increasing
    knots_xy: np.ndarray  # (m, 2) unit-speed polyline through the curve
    degree: int
    smoothness: float
    center: np.ndarray  # cluster centroid (progress reference)
    converged: bool
    d_trace: tuple[float, ...] = ()
    anchors: np.ndarray | None = None  # (k, 2)
    anchor_gammas: np.ndarray | None = None  # (k,) chordal arc length to center anchor
    anchor_spacing: float = DEFAULT_ANCHOR_SPACING
    extent: float | None = None


# ---------------------------------------------------------------------------
# Linear patterns
# ---------------------------------------------------------------------------


def fit_linear(cluster: Cluster) -> LinearPattern:
    """First principal component of the cluster, as center + unit direction."""
    pts = np.asarray(cluster.points, dtype=float)
    if len(pts) < 2:
        raise ValueError("linear pattern needs at least 2 points")
    center = pts.mean(axis=0)
    centered = pts - center
    cov = centered.T @ centered
    if not np.any(np.abs(cov) > 1e-18):
        raise DegenerateClusterError("all cluster points coincide")
    evals, evecs = np.linalg.eigh(cov)
    direction = evecs[:, int(np.argmax(evals))]
    if direction[0] < 0 or (direction[0] == 0 and direction[1] < 0):
        direction = -direction
    return LinearPattern(center=center, direction=direction / np.linalg.norm(direction))


def transform_linear(pattern: LinearPattern, p) -> PatternCoordinates:
    """(gamma, delta) of a point relative to a linear pattern."""
    gammas, deltas = transform_linear_many(pattern, np.asarray(p, dtype=float).reshape(1, 2))
    return PatternCoordinates(float(gammas[0]), float(deltas[0]))


def transform_linear_many(pattern: LinearPattern, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    rel = pts - pattern.center
    t = rel @ pattern.direction
    proj = np.outer(t, pattern.direction)
    delta = np.linalg.norm(rel - proj, axis=1)
    return np.abs(t), delta


# ---------------------------------------------------------------------------
# Polyline helpers
# ---------------------------------------------------------------------------


def _polyline_arclength(xy: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(xy, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def _project_onto_polyline(xy: np.ndarray, cum: np.ndarray, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact projection of points onto a polyline.

    Returns (s, d): arc-length position of the nearest polyline point and
    the Euclidean distance to it, per input point.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    a = xy[:-1]  # (m-1, 2)
    b = xy[1:]
    ab = b - a
    seg_len2 = np.einsum("ij,ij->i", ab, ab)
    seg_len2 = np.where(seg_len2 > 0, seg_len2, 1.0)
    # t[i, j]: position of point i along segment j, clamped to [0, 1]
    ap = pts[:, None, :] - a[None, :, :]
    t = np.clip(np.einsum("pjk,jk->pj", ap, ab) / seg_len2, 0.0, 1.0)
    foot = a[None, :, :] + t[:, :, None] * ab[None, :, :]
    d2 = np.einsum("pjk,pjk->pj", pts[:, None, :] - foot, pts[:, None, :] - foot)
    j = np.argmin(d2, axis=1)
    rows = np.arange(len(pts))
    seg_len = np.sqrt(seg_len2)
    s = cum[j] + t[rows, j] * seg_len[j]
    d = np.sqrt(d2[rows, j])
    return s, d


def _resample_unit_speed(xy: np.ndarray, step: float = RESAMPLE_STEP) -> tuple[np.ndarray, np.ndarray]:
    """Resample a polyline at fixed arc-length steps (endpoint kept).

    The returned lambda values are the arc lengths of the *new* polyline,
    so (lambda, xy) is a unit-speed parameterization of what is returned.
    """
    cum = _polyline_arclength(xy)
    total = cum[-1]
    if total <= step:
        pts = np.vstack([xy[0], xy[-1]])
        return _polyline_arclength(pts), pts
    n = int(math.floor(total / step))
    s = np.arange(n + 1) * step
    if total - s[-1] > 1e-9:
        s = np.append(s, total)
    x = np.interp(s, cum, xy[:, 0])
    y = np.interp(s, cum, xy[:, 1])
    pts = np.column_stack([x, y])
    return _polyline_arclength(pts), pts


# ---------------------------------------------------------------------------
# Principal curve fitting
# ---------------------------------------------------------------------------


def fit_principal_curve(cluster: Cluster, config: PatternFitConfig) -> CurvedPattern:
    """Iteratively fit a principal curve to the cluster.

    Starts from the first principal component and alternates projection,
    per-coordinate smoothing-spline averaging in arc length, and unit-speed
    reparameterization, until the relative change of the mean squared
    projection distance drops below the configured threshold. Spline degree
    is 2 (1 for two-point clusters). The smoothing is pushed as high as
    possible subject to every cluster point staying within
    pc_smoothness_factor meters of the curve.
    """
    pts = np.asarray(cluster.points, dtype=float)
    center = pts.mean(axis=0)
    if len(pts) < 2:
        raise ValueError("principal curve needs at least 2 points")

    if len(pts) == 2:
        if np.linalg.norm(pts[1] - pts[0]) < 1e-12:
            raise DegenerateClusterError("all cluster points coincide")
        lam, xy = _resample_unit_speed(pts.copy())
        return CurvedPattern(
            knots_lambda=lam,
            knots_xy=xy,
            degree=1,
            smoothness=config.pc_smoothness_factor,
            center=center,
            converged=True,
            d_trace=(0.0,),
        )

    lp = fit_linear(cluster)
    t = (pts - lp.center) @ lp.direction
    lo, hi = float(t.min()), float(t.max())
    if hi - lo < 1e-12:
        raise DegenerateClusterError("cluster has no extent along its principal component")
    n_init = max(2, int(math.ceil((hi - lo) / RESAMPLE_STEP)) + 1)
    line = lp.center + np.outer(np.linspace(lo, hi, n_init), lp.direction)
    lam, xy = _resample_unit_speed(line)

    degree = min(config.max_spline_degree, 2)
    _, d0 = _project_onto_polyline(xy, lam, pts)
    prev_d = float(np.mean(d0**2))
    trace = [prev_d]
    converged = False

    for _ in range(config.max_iterations):
        s, _ = _project_onto_polyline(xy, lam, pts)
        xy_new, _ = _smooth_conditional_expectation(
            s, pts, degree, config.pc_smoothness_factor
        )
        lam_new, xy_new = _resample_unit_speed(xy_new)
        _, d = _project_onto_polyline(xy_new, lam_new, pts)
        cur_d = float(np.mean(d**2))
        rel = abs(cur_d - prev_d) / max(prev_d, 1e-12)
        if cur_d > prev_d and rel >= config.convergence_threshold:
            # the iteration is not guaranteed to converge; a materially
            # worse refit means we are past the practical fixed point,
            # so keep the best curve seen so far
            converged = True
            break
        lam, xy = lam_new, xy_new
        trace.append(cur_d)
        prev_d = cur_d
        if rel < config.convergence_threshold:
            converged = True
            break

    return CurvedPattern(
        knots_lambda=lam,
        knots_xy=xy,
        degree=degree,
        smoothness=config.pc_smoothness_factor,
        center=center,
        converged=converged,
        d_trace=tuple(trace),
    )


def _smooth_conditional_expectation(
    s: np.ndarray, pts: np.ndarray, degree: int, max_dist: float
) -> tuple[np.ndarray, int]:
    """Smoothing-spline estimate of the curve over the projection indices.

    Duplicate projection indices are averaged (the conditional expectation
    at that arc position). The spline smoothing parameter is the largest
    value keeping every point within max_dist of the densely sampled curve,
    found by doubling + bisection.
    """
    order = np.argsort(s, kind="stable")
    s_sorted = s[order]
    p_sorted = pts[order]

    lam_u: list[float] = []
    xy_u: list[np.ndarray] = []
    i = 0
    while i < len(s_sorted):
        j = i
        while j + 1 < len(s_sorted) and s_sorted[j + 1] - s_sorted[i] < 1e-9:
            j += 1
        lam_u.append(float(s_sorted[i:j + 1].mean()))
        xy_u.append(p_sorted[i:j + 1].mean(axis=0))
        i = j + 1
    lam_arr = np.array(lam_u)
    xy_arr = np.vstack(xy_u)

    k = min(degree, len(lam_arr) - 1)
    if k < 1:
        # everything projected to one spot: fall back to a tiny segment
        return np.vstack([xy_arr[0], xy_arr[0] + 1e-6]), 1

    dense = np.linspace(lam_arr[0], lam_arr[-1], max(64, 8 * len(lam_arr)))

    def curve_for(smooth: float) -> np.ndarray:
        sx = UnivariateSpline(lam_arr, xy_arr[:, 0], k=k, s=smooth)
        sy = UnivariateSpline(lam_arr, xy_arr[:, 1], k=k, s=smooth)
        return np.column_stack([sx(dense), sy(dense)])

    def max_point_dist(xy_curve: np.ndarray) -> float:
        cum = _polyline_arclength(xy_curve)
        _, d = _project_onto_polyline(xy_curve, cum, pts)
        return float(d.max())

    # Largest smoothing that respects the distance constraint.
    lo_s = 0.0
    hi_s = None
    smooth = 1.0
    for _ in range(40):
        if max_point_dist(curve_for(smooth)) <= max_dist:
            lo_s = smooth
            smooth *= 4.0
        else:
            hi_s = smooth
            break
        if smooth > 1e12:
            break
    if hi_s is not None:
        for _ in range(25):
            mid = 0.5 * (lo_s + hi_s)
            if max_point_dist(curve_for(mid)) <= max_dist:
                lo_s = mid
            else:
                hi_s = mid
            if hi_s - lo_s <= 1e-3 * max(hi_s, 1.0):
                break
    return curve_for(lo_s), k


# ---------------------------------------------------------------------------
# Anchors and curve transforms
# ---------------------------------------------------------------------------


def build_anchors(pattern: CurvedPattern, extent: float,
                  spacing: float = DEFAULT_ANCHOR_SPACING) -> CurvedPattern:
    """Place anchor points along the curve, `extent` meters of arc per side.

    The reference (center) anchor sits at the curve point nearest the
    cluster center. Beyond the fitted arc the curve is extended linearly
    along its end tangents.
    """
    if extent < 0:
        raise ValueError("extent must be non-negative")
    xy, lam = pattern.knots_xy, pattern.knots_lambda
    s_center, _ = _project_onto_polyline(xy, lam, pattern.center.reshape(1, 2))
    s_c = float(s_center[0])

    n_side = int(math.ceil(extent / spacing - 1e-9)) if extent > 0 else 0
    offsets = (np.arange(-n_side, n_side + 1)) * spacing
    anchors = _point_at_arclength(xy, lam, s_c + offsets)

    chord = np.linalg.norm(np.diff(anchors, axis=0), axis=1)
    cum_chord = np.concatenate([[0.0], np.cumsum(chord)])
    gammas = np.abs(cum_chord - cum_chord[n_side])

    return replace(
        pattern,
        anchors=anchors,
        anchor_gammas=gammas,
        anchor_spacing=spacing,
        extent=float(extent),
    )


def _point_at_arclength(xy: np.ndarray, lam: np.ndarray, s) -> np.ndarray:
    """Evaluate the polyline (with end-tangent extrapolation) at arc positions."""
    s = np.atleast_1d(np.asarray(s, dtype=float))
    total = lam[-1]
    tan_start = xy[1] - xy[0]
    tan_start = tan_start / np.linalg.norm(tan_start)
    tan_end = xy[-1] - xy[-2]
    tan_end = tan_end / np.linalg.norm(tan_end)

    out = np.empty((len(s), 2))
    inside = (s >= 0) & (s <= total)
    out[inside, 0] = np.interp(s[inside], lam, xy[:, 0])
    out[inside, 1] = np.interp(s[inside], lam, xy[:, 1])
    before = s < 0
    out[before] = xy[0] + np.outer(s[before], tan_start)
    after = s > total
    out[after] = xy[-1] + np.outer(s[after] - total, tan_end)
    return out


def transform_curve(pattern: CurvedPattern, p) -> PatternCoordinates:
    """(gamma, delta) of a point via the anchor approximation."""
    gammas, deltas = transform_curve_many(pattern, np.asarray(p, dtype=float).reshape(1, 2))
    return PatternCoordinates(float(gammas[0]), float(deltas[0]))


def transform_curve_many(pattern: CurvedPattern, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if pattern.anchors is None:
        raise ValueError("anchors not built; call build_anchors first")
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    diff = pts[:, None, :] - pattern.anchors[None, :, :]
    d = np.sqrt(np.einsum("pak,pak->pa", diff, diff))
    d_min = d.min(axis=1, keepdims=True)
    # distance ties break toward the smaller progress value
    gamma_masked = np.where(d == d_min, pattern.anchor_gammas[None, :], np.inf)
    j = np.argmin(gamma_masked, axis=1)
    rows = np.arange(len(pts))
    return pattern.anchor_gammas[j], d[rows, j]


def transform_many(pattern, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Dispatch on pattern kind; returns (gamma, delta) arrays."""
    if isinstance(pattern, LinearPattern):
        return transform_linear_many(pattern, points)
    if isinstance(pattern, CurvedPattern):
        return transform_curve_many(pattern, points)
    raise TypeError(f"unknown pattern type {type(pattern)!r}")


def effective_extent(pattern: CurvedPattern, model,
                     cap: float = TRAINING_ANCHOR_EXTENT) -> float:
    """Smallest progress on the anchor lattice with on-pattern risk below 5%.

    `model` needs a predict_at(gamma, delta) -> probability method. Returns
    the cap when the predicted risk never drops below the threshold.
    """
    spacing = pattern.anchor_spacing if pattern is not None else DEFAULT_ANCHOR_SPACING
    g = 0.0
    while g <= cap + 1e-9:
        if model.predict_at(g, 0.0) < RISK_EXTENT_THRESHOLD:
            return g
        g += spacing
    return cap


def pattern_to_dict(pattern) -> dict:
    """JSON-ready dump (console overlay / debugging)."""
    if isinstance(pattern, LinearPattern):
        return {
            "kind": "linear",
            "center": [float(pattern.center[0]), float(pattern.center[1])],
            "direction": [float(pattern.direction[0]), float(pattern.direction[1])],
        }
    if isinstance(pattern, CurvedPattern):
        out = {
            "kind": "curved",
            "center": [float(pattern.center[0]), float(pattern.center[1])],
            "degree": pattern.degree,
            "smoothness": pattern.smoothness,
            "converged": pattern.converged,
            "knots": [
                [float(l), float(x), float(y)]
                for l, (x, y) in zip(pattern.knots_lambda, pattern.knots_xy)
            ],
            "extent": pattern.extent,
        }
        if pattern.anchors is not None:
            out["anchors"] = [[float(x), float(y)] for x, y in pattern.anchors]
        return out
    raise TypeError(f"unknown pattern type {type(pattern)!r}")

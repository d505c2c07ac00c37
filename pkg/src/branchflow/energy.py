"""Graph energy and the phase-field energy on staggered grids."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .core import (
    MERGE_RTOL,
    DomainError,
    ExponentPack,
    GridField,
    TransportGraph,
    Window,
    check_window,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EnergyBreakdown:
    lower_order: float
    dirichlet: float
    total: float

    @classmethod
    def of(cls, lower_order: float, dirichlet: float) -> "EnergyBreakdown":
        return cls(float(lower_order), float(dirichlet), float(lower_order + dirichlet))

    def as_row(self, eps: float) -> Dict[str, float]:
        return {"eps": eps, "lower_order": self.lower_order, "dirichlet": self.dirichlet, "total": self.total}


@dataclass(frozen=True)
class SmoothingParams:
    delta: float = 0.0

    def __post_init__(self):
        if not self.delta >= 0:
            raise DomainError(f"smoothing delta must be >= 0, got {self.delta}")


EXACT = SmoothingParams(0.0)


def default_smoothing(theta_total: float, eps: float, ep: ExponentPack) -> SmoothingParams:
    """Smoothing matched to the expected ridge height ``theta / eps**gamma``."""
    return SmoothingParams(1e-6 * theta_total / eps ** ep.gamma)


# ---------------------------------------------------------------------------
# graphs


def _collinear_groups(g: TransportGraph, tol: float) -> List[List[int]]:
    """Group edges lying on a common line.

    Lines are bucketed by quantized (direction, signed offset); a new edge is
    compared only against representatives in the neighbouring buckets.
    """
    groups: List[List[int]] = []
    reps: List[Tuple[np.ndarray, np.ndarray]] = []
    buckets: Dict[Tuple[int, int], List[int]] = {}
    scale = max(g.diameter(), 1e-300)
    atol = max(tol / scale, 1e-15)
    bin_a = 4.0 * atol
    bin_o = 4.0 * max(tol, 1e-300)
    for k, (a, b, _) in enumerate(g.edges):
        p, q = g.vertices[a], g.vertices[b]
        d = q - p
        d = d / np.hypot(*d)
        if d[0] < 0 or (d[0] == 0 and d[1] < 0):
            d = -d
        ang = float(np.arctan2(d[1], d[0]))
        off = float(p[0] * d[1] - p[1] * d[0])
        ka, ko = int(np.floor(ang / bin_a)), int(np.floor(off / bin_o))
        keys = [(ka + da, ko + do) for da in (-1, 0, 1) for do in (-1, 0, 1)]
        if abs(abs(ang) - 0.5 * np.pi) <= 2 * bin_a:
            # near-vertical lines wrap around; also look at the flipped representation
            fa, fo = int(np.floor(-ang / bin_a)), int(np.floor(-off / bin_o))
            keys += [(fa + da, fo + do) for da in (-1, 0, 1) for do in (-1, 0, 1)]
        found = -1
        for key in keys:
            if found >= 0:
                break
            for gi in buckets.get(key, ()):
                p0, d0 = reps[gi]
                cross_dir = abs(d[0] * d0[1] - d[1] * d0[0])
                o = p - p0
                cross_pt = abs(o[0] * d0[1] - o[1] * d0[0])
                if cross_dir <= atol and cross_pt <= tol:
                    found = gi
                    break
        if found >= 0:
            groups[found].append(k)
        else:
            reps.append((p, d))
            groups.append([k])
            buckets.setdefault((ka, ko), []).append(len(groups) - 1)
    return groups


def malpha_graph(g: TransportGraph, alpha: float) -> float:
    """Sum of length times mass**alpha, with masses on overlapping collinear pieces added first."""
    if not 0 < alpha < 1 + 1e-15:
        raise DomainError(f"alpha must lie in (0, 1], got {alpha}")
    tol = MERGE_RTOL * max(g.diameter(), 1e-300)
    lengths = g.lengths()
    if np.any(lengths <= tol):
        raise DomainError("graph contains a zero-length edge")
    total = 0.0
    for group in _collinear_groups(g, tol):
        if len(group) == 1:
            k = group[0]
            total += lengths[k] * g.edges[k][2] ** alpha
            continue
        a0, b0, _ = g.edges[group[0]]
        origin = g.vertices[a0]
        direction = g.vertices[b0] - origin
        direction = direction / np.hypot(*direction)
        spans = []
        for k in group:
            a, b, m = g.edges[k]
            ta = float((g.vertices[a] - origin) @ direction)
            tb = float((g.vertices[b] - origin) @ direction)
            sign = 1.0 if tb > ta else -1.0
            spans.append((min(ta, tb), max(ta, tb), sign * m))
        cuts = sorted({t for s in spans for t in s[:2]})
        merged = [cuts[0]]
        for t in cuts[1:]:
            if t - merged[-1] > tol:
                merged.append(t)
        for lo, hi in zip(merged[:-1], merged[1:]):
            mid = 0.5 * (lo + hi)
            m = sum(s[2] for s in spans if s[0] - tol <= mid <= s[1] + tol)
            total += (hi - lo) * abs(m) ** alpha
    return float(total)


# ---------------------------------------------------------------------------
# phase-field energy


def _edge_weights(n: int) -> np.ndarray:
    """Trapezoid weights for face rows: the two rows on the window boundary count half."""
    w = np.ones(n)
    w[0] = w[-1] = 0.5
    return w


def _lower_density(mag2: np.ndarray, beta: float, delta: float) -> np.ndarray:
    if delta == 0.0:
        return np.sqrt(mag2) ** beta
    return (mag2 + delta * delta) ** (0.5 * beta)


def malpha_eps(
    u: GridField,
    ep: ExponentPack,
    eps: float,
    window: Optional[Window] = None,
    smoothing: SmoothingParams = EXACT,
) -> EnergyBreakdown:
    """Phase-field energy of ``u`` restricted to a cell window.

    Cell magnitudes use face values averaged to centres.  Gradient terms are
    differences between staggered neighbours that both lie in the window; the
    differences along a face row lying on the window boundary get weight one half,
    so tangential contributions add up exactly over a partition into windows.
    """
    if not eps > 0:
        raise DomainError(f"eps must be positive, got {eps}")
    s = u.spec
    i0, i1, j0, j1 = check_window(s, window)
    area = s.cell_area
    ux = u.ux[i0:i1 + 1, j0:j1]
    uy = u.uy[i0:i1, j0:j1 + 1]
    cx = 0.5 * (ux[:-1] + ux[1:])
    cy = 0.5 * (uy[:, :-1] + uy[:, 1:])
    lower = eps ** (-ep.gamma1) * float(np.sum(_lower_density(cx * cx + cy * cy, ep.beta, smoothing.delta))) * area
    wx = _edge_weights(ux.shape[0])
    wy = _edge_weights(uy.shape[1])
    grad2 = (
        np.sum(np.diff(ux, axis=0) ** 2) / s.hx ** 2
        + np.sum(wx[:, None] * np.diff(ux, axis=1) ** 2) / s.hy ** 2
        + np.sum(np.diff(uy, axis=1) ** 2) / s.hy ** 2
        + np.sum(wy[None, :] * np.diff(uy, axis=0) ** 2) / s.hx ** 2
    )
    dirichlet = eps ** ep.gamma2 * float(grad2) * area
    return EnergyBreakdown.of(lower, dirichlet)


def _neg_laplacian_1d(a: np.ndarray, axis: int, h: float) -> np.ndarray:
    """``D^T D a`` for forward differences along ``axis`` with free ends."""
    d = np.diff(a, axis=axis) / h
    out = np.zeros_like(a)
    sl_lo = [slice(None)] * a.ndim
    sl_hi = [slice(None)] * a.ndim
    sl_lo[axis] = slice(0, -1)
    sl_hi[axis] = slice(1, None)
    out[tuple(sl_lo)] -= d / h
    out[tuple(sl_hi)] += d / h
    return out


def malpha_eps_gradient(u: GridField, ep: ExponentPack, eps: float, smoothing: SmoothingParams) -> GridField:
    """L2 gradient (per unit cell area) of the smoothed energy over the whole grid."""
    if not eps > 0:
        raise DomainError(f"eps must be positive, got {eps}")
    if not smoothing.delta > 0:
        raise DomainError("gradient requires smoothing delta > 0")
    s = u.spec
    cx, cy = u.cell_components()
    weight = eps ** (-ep.gamma1) * ep.beta * (cx * cx + cy * cy + smoothing.delta ** 2) ** (0.5 * ep.beta - 1.0)
    gx = weight * cx
    gy = weight * cy
    grad_x = np.zeros_like(u.ux)
    grad_y = np.zeros_like(u.uy)
    grad_x[:-1] += 0.5 * gx
    grad_x[1:] += 0.5 * gx
    grad_y[:, :-1] += 0.5 * gy
    grad_y[:, 1:] += 0.5 * gy
    c = 2.0 * eps ** ep.gamma2
    wx = _edge_weights(s.nx + 1)[:, None]
    wy = _edge_weights(s.ny + 1)[None, :]
    grad_x += c * (_neg_laplacian_1d(u.ux, 0, s.hx) + wx * _neg_laplacian_1d(u.ux, 1, s.hy))
    grad_y += c * (wy * _neg_laplacian_1d(u.uy, 0, s.hx) + _neg_laplacian_1d(u.uy, 1, s.hy))
    return GridField(s, grad_x, grad_y)


def inner(a: GridField, b: GridField) -> float:
    """Face inner product weighted by cell area."""
    return float((np.sum(a.ux * b.ux) + np.sum(a.uy * b.uy)) * a.spec.cell_area)

"""Divergence-constrained minimisation of the phase-field energy.

Point data are smoothed at the scale ``eps**gamma``.  The constrained problem is
solved by an alternating-direction splitting: the quadratic part (Dirichlet term
plus the divergence constraint and no-flux walls) is diagonal in the staggered
cosine/sine basis and solved exactly, and the concave power term is handled by
its cell-wise proximal map.  Continuation in ``eps`` warm-starts each stage.

The module also builds explicit competitors from a transport graph (tubes plus
radial node corrections) and runs the convergence sweep against the Steiner
oracle.
"""

from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import fft

from .core import (
    AtomicMeasure,
    DomainError,
    ExponentPack,
    GridField,
    GridSpec,
    ScalarGrid,
    SolverError,
    TransportGraph,
    exponents,
    field_norms,
    graph_divergence,
    grid_divergence,
)
from .divsolve import (
    dirichlet_divsolve,
    radial_divsolve,
    rasterize_radial_flux,
    spectral,
)
from .dyadic import N_SHELLS, tube_faces, _add_blocks
from .energy import EXACT, EnergyBreakdown, malpha_eps, malpha_graph
from .profile import RadialKernel, solve_profile
from .transport import gilbert_steiner_oracle, rasterize_atoms

logger = logging.getLogger(__name__)

FEASIBILITY_RTOL = 1e-10


# ---------------------------------------------------------------------------
# data


def mollify(mu: AtomicMeasure, eps: float, ep: ExponentPack, kernel: RadialKernel, spec: GridSpec) -> ScalarGrid:
    """Rasterised convolution of a balanced atomic measure with the kernel at radius ``eps**gamma``."""
    if not eps > 0:
        raise DomainError(f"eps must be positive, got {eps}")
    tv = max(mu.total_variation(), 1e-300)
    if abs(mu.total()) > 1e-12 * tv:
        raise DomainError(f"data must have zero total mass, got {mu.total():.3e}")
    f = rasterize_atoms(mu.merged(), eps ** ep.gamma, kernel, spec)
    v = f.values
    a = np.abs(v)
    # roundoff only (atoms sit well inside the box); kept on the support
    v = v - v.sum() * a / max(a.sum(), 1e-300)
    f = ScalarGrid(spec, v)
    logger.debug("mollify eps=%.4g: eps^gamma2 ||f||^2 = %.4g", eps, l2_hypothesis(f, eps, ep))
    return f


def l2_hypothesis(f: ScalarGrid, eps: float, ep: ExponentPack) -> float:
    """``eps**gamma2 * ||f||_2^2``, the data term that must vanish in the limit."""
    return eps ** ep.gamma2 * f.norm(2) ** 2


def project_divergence(u: GridField, target: ScalarGrid) -> GridField:
    """L2-orthogonal projection onto no-flux fields with ``grid_divergence == target``."""
    if u.spec != target.spec:
        raise DomainError("field and target must share a grid")
    tv = float(np.sum(np.abs(target.values)))
    if abs(float(np.sum(target.values))) > 1e-10 * max(tv, 1e-300):
        raise DomainError("divergence target must have zero mean")
    return spectral(u.spec).project(u, target)


# ---------------------------------------------------------------------------
# schedule and rows


@dataclass(frozen=True)
class Schedule:
    """Continuation plan.

    ``steps_per_eps`` bounds the splitting iterations of each stage; a stage also
    ends when the relative splitting residual drops below ``tol``.  The coupling
    weight of the splitting grows geometrically within each stage from
    ``penalty`` to ``penalty_end`` times the automatic choice: a loose coupling
    lets mass move between branches, a tight one settles the profile.
    """

    eps_list: Tuple[float, ...]
    steps_per_eps: int = 1500
    tol: float = 1e-6
    penalty: float = 1.0
    penalty_end: float = 1000.0
    check_every: int = 10
    seed: int = 0

    def __post_init__(self):
        eps = tuple(float(e) for e in self.eps_list)
        if not eps or any(e <= 0 for e in eps):
            raise DomainError("eps_list must be nonempty and positive")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise DomainError("eps_list must be strictly decreasing")
        if self.steps_per_eps < 1 or self.check_every < 1:
            raise DomainError("step counts must be positive")
        if not (self.penalty > 0 and self.penalty_end > 0):
            raise DomainError("penalties must be positive")
        object.__setattr__(self, "eps_list", eps)

    @classmethod
    def geometric(cls, eps_max: float, eps_min: float, **kw) -> "Schedule":
        n = int(round(math.log2(eps_max / eps_min))) + 1
        return cls(tuple(eps_max * 0.5 ** k for k in range(n)), **kw)


@dataclass(frozen=True)
class SweepRow:
    eps: float
    energy: EnergyBreakdown
    ratio: float
    div_residual: float
    l2_hyp: float
    iterations: int = 0

    def as_row(self) -> Dict[str, float]:
        return {
            "eps": self.eps,
            "lower": self.energy.lower_order,
            "dirichlet": self.energy.dirichlet,
            "total": self.energy.total,
            "ratio": self.ratio,
            "div_resid": self.div_residual,
            "l2_hyp": self.l2_hyp,
        }


SWEEP_COLUMNS = ("eps", "lower", "dirichlet", "total", "ratio", "div_resid", "l2_hyp")


# ---------------------------------------------------------------------------
# splitting solver


class _CellBasis:
    """Cell-centred transforms matching face modes through face-to-cell averaging.

    The x component of a cell vector uses a sine transform along x and a cosine
    transform along y, so averaging the x faces is multiplication by ``cos``.
    """

    def __init__(self, spec: GridSpec):
        self.cx = np.cos(np.pi * np.arange(spec.nx) / (2 * spec.nx))
        self.cy = np.cos(np.pi * np.arange(spec.ny) / (2 * spec.ny))

    @staticmethod
    def x_fwd(c: np.ndarray) -> np.ndarray:
        t = fft.dct(fft.dst(c, type=2, norm="ortho", axis=0), type=2, norm="ortho", axis=1)
        out = np.zeros_like(t)
        out[1:] = t[:-1]
        return out

    @staticmethod
    def y_fwd(c: np.ndarray) -> np.ndarray:
        t = fft.dct(fft.dst(c, type=2, norm="ortho", axis=1), type=2, norm="ortho", axis=0)
        out = np.zeros_like(t)
        out[:, 1:] = t[:, :-1]
        return out


def _power_prox(s: np.ndarray, c: float, beta: float) -> np.ndarray:
    """Minimiser ``t >= 0`` of ``c t**beta + (t - s)**2 / 2`` for each ``s >= 0``.

    The objective has a local minimum at zero and, when ``s`` is large enough, a
    second one found by Newton's method from ``s`` (the derivative is convex and
    positive there); the lower of the two wins.
    """
    t_infl = (c * beta * (1.0 - beta)) ** (1.0 / (2.0 - beta))
    out = np.zeros_like(s)
    cand = s > t_infl
    if not np.any(cand):
        return out
    ss = s[cand]
    t = ss.copy()
    for _ in range(40):
        g = c * beta * t ** (beta - 1.0) + t - ss
        h = np.maximum(c * beta * (beta - 1.0) * t ** (beta - 2.0) + 1.0, 1e-300)
        t = np.maximum(t - g / h, t_infl)
    root_ok = c * beta * t ** (beta - 1.0) + t - ss <= 1e-12 * np.maximum(ss, 1e-300)
    better = c * t ** beta + 0.5 * (t - ss) ** 2 < 0.5 * ss * ss
    out[cand] = np.where(root_ok & better, t, 0.0)
    return out


@dataclass
class StageReport:
    eps: float
    iterations: int
    energy_trace: List[float] = field(default_factory=list)
    accepted: List[float] = field(default_factory=list)
    residual: float = 0.0


def _energy(u: GridField, ep: ExponentPack, eps: float) -> EnergyBreakdown:
    return malpha_eps(u, ep, eps, smoothing=EXACT)


def _stage(u0: GridField, f: ScalarGrid, ep: ExponentPack, eps: float, sched: Schedule) -> Tuple[GridField, StageReport]:
    spec = f.spec
    ms = spectral(spec)
    basis = _CellBasis(spec)
    c_low = eps ** (-ep.gamma1)
    c_dir = eps ** ep.gamma2
    fh = ms.cells_fwd(f.values)
    cosx = basis.cx[:, None]
    cosy = basis.cy[None, :]

    u = u0
    cx, cy = u.cell_components()
    mag = np.hypot(cx, cy)
    scale = float(np.max(mag)) if np.any(mag) else 1.0
    # coupling weight: the thresholding level of the proximal map sits at a few
    # percent of the current peak field strength
    t_ref = 0.05 * scale
    rho = sched.penalty * c_low * ep.beta * (1.0 - ep.beta) / t_ref ** (2.0 - ep.beta)
    vx, vy = cx.copy(), cy.copy()
    wx, wy = np.zeros_like(cx), np.zeros_like(cy)

    def curv(r):
        return 2.0 * c_dir * ms.lap + r * cosx ** 2, 2.0 * c_dir * ms.lap + r * cosy ** 2

    ax, ay = curv(rho)
    growth = (sched.penalty_end / sched.penalty) ** (1.0 / sched.steps_per_eps)
    best = u
    best_e = _energy(u, ep, eps).total
    rep = StageReport(eps, 0, [best_e], [best_e])
    for it in range(1, sched.steps_per_eps + 1):
        # nonsmooth block first, then the quadratic block, then the multiplier
        px, py = cx + wx, cy + wy
        s = np.hypot(px, py)
        t = _power_prox(s, c_low / rho, ep.beta)
        ratio = np.divide(t, s, out=np.zeros_like(s), where=s > 0)
        nvx, nvy = ratio * px, ratio * py
        dual = rho * math.sqrt(float(np.sum((nvx - vx) ** 2 + (nvy - vy) ** 2)))
        vx, vy = nvx, nvy
        Zx, Zy = basis.x_fwd(vx - wx), basis.y_fwd(vy - wy)
        X, Y = ms.constrained_quadratic(ax, ay, rho * cosx * Zx, rho * cosy * Zy, fh)
        u = ms.field_inv(X, Y)
        cx, cy = u.cell_components()
        rx, ry = cx - vx, cy - vy
        wx, wy = wx + rx, wy + ry
        primal = math.sqrt(float(np.sum(rx * rx + ry * ry)))
        if growth != 1.0:
            rho *= growth
            wx, wy = wx / growth, wy / growth
            ax, ay = curv(rho)
        if it % sched.check_every == 0 or it == sched.steps_per_eps:
            e = _energy(u, ep, eps).total
            if not math.isfinite(e):
                err = SolverError(f"energy is not finite at eps={eps}, iteration {it}")
                err.stage_field = best
                raise err
            rep.energy_trace.append(e)
            if e <= best_e:
                best, best_e = u, e
                rep.accepted.append(e)
            norm = max(math.sqrt(float(np.sum(cx * cx + cy * cy))), 1e-300)
            rel = max(primal / norm, dual / (rho * norm))
            rep.residual = rel
            if rel < sched.tol:
                rep.iterations = it
                break
        rep.iterations = it
    return best, rep


def minimize_constrained(
    f_eps: ScalarGrid,
    ep: ExponentPack,
    sched: Schedule,
    init: Optional[GridField] = None,
    reference: Optional[float] = None,
    data_for_eps=None,
    reports: Optional[List[StageReport]] = None,
    on_stage=None,
) -> Tuple[GridField, List[SweepRow]]:
    """Minimise the phase-field energy under ``grid_divergence(u) == f_eps`` with no-flux walls.

    ``data_for_eps`` optionally maps each stage's ``eps`` to its own data grid
    (used when the data are re-smoothed per stage); otherwise ``f_eps`` is used
    throughout.  ``reference`` scales the reported ratio.  Stage reports are
    appended to ``reports`` when given and ``on_stage(eps, u)`` is called after
    every stage.  A failing stage raises :class:`SolverError` carrying the last
    good field as ``stage_field``.
    """
    spec = f_eps.spec
    rows: List[SweepRow] = []
    first = data_for_eps(sched.eps_list[0]) if data_for_eps else f_eps
    if not np.any(first.values):
        u = spec.zeros_field()
        for eps in sched.eps_list:
            rows.append(SweepRow(eps, EnergyBreakdown.of(0.0, 0.0), 0.0, 0.0, 0.0, 0))
        return u, rows
    u = project_divergence(init if init is not None else spec.zeros_field(), first)
    for eps in sched.eps_list:
        f = data_for_eps(eps) if data_for_eps else f_eps
        u = project_divergence(u, f)
        u, rep = _stage(u, f, ep, eps, sched)
        e = _energy(u, ep, eps)
        fmax = max(float(np.max(np.abs(f.values))), 1e-300)
        resid = float(np.max(np.abs(grid_divergence(u).values - f.values))) / fmax
        if resid > FEASIBILITY_RTOL:
            err = SolverError(f"feasibility lost at eps={eps}: relative residual {resid:.2e}")
            err.stage_field = u
            raise err
        if reports is not None:
            reports.append(rep)
        if on_stage is not None:
            on_stage(eps, u)
        ratio = e.total / reference if reference else float("nan")
        rows.append(SweepRow(eps, e, ratio, resid, l2_hypothesis(f, eps, ep), rep.iterations))
        logger.info(
            "stage eps=%.4g: E=%.6g (lower %.4g, dirichlet %.4g) ratio=%.4f iters=%d resid=%.1e",
            eps, e.total, e.lower_order, e.dirichlet, ratio, rep.iterations, rep.residual,
        )
    return u, rows


# ---------------------------------------------------------------------------
# explicit competitors from a transport graph


@functools.lru_cache(maxsize=16)
def profile_c0(beta: float) -> float:
    return solve_profile(beta).c0


@dataclass(frozen=True)
class RecoveryDiagnostics:
    """Measured constants of the four convergence bounds for a graph competitor.

    ``C_l1``: excess ``(int|u| - mass*length) / eps**gamma``; ``tv_excess``: relative
    excess of the divergence total variation over the graph's; ``C_div``:
    ``eps**gamma * ||div u||_2``; ``C_gap``: ``|E - c0 M| / eps**gamma``.
    """

    eps: float
    energy: EnergyBreakdown
    c0_malpha: float
    gap: float
    l1: float
    graph_l1: float
    C_l1: float
    tv_div: float
    graph_tv: float
    tv_excess: float
    C_div: float
    C_gap: float
    ball_radius: float
    fix_linf: float

    def as_row(self) -> Dict[str, float]:
        return {
            "eps": self.eps,
            "total": self.energy.total,
            "c0_malpha": self.c0_malpha,
            "gap": self.gap,
            "C_l1": self.C_l1,
            "tv_excess": self.tv_excess,
            "C_div": self.C_div,
            "C_gap": self.C_gap,
        }


RECOVERY_COLUMNS = ("eps", "total", "c0_malpha", "gap", "C_l1", "tv_excess", "C_div", "C_gap")


def _vertex_source(kernel: RadialKernel, parts: Sequence[Tuple[float, float]], outer: float, n_shells: int = N_SHELLS):
    """Radial solution for ``sum_k mass_k rho_{R_k}`` (signed masses, common centre)."""
    r = np.linspace(0.0, outer, n_shells + 1)
    M = np.zeros_like(r)
    for m, R in parts:
        M += m * kernel.cumulative_mass(r / R)
    M -= M[-1] * (r / outer) ** 2
    F = np.diff(M) / (np.pi * np.diff(r * r))
    return radial_divsolve(F, outer)


def recovery_sequence(
    g: TransportGraph, eps: float, ep: ExponentPack, kernel: RadialKernel, spec: GridSpec
) -> Tuple[GridField, RecoveryDiagnostics]:
    """Competitor built from kernel-smoothed tubes along the edges plus radial vertex corrections.

    Each edge carrying mass ``m`` becomes a tube of radius ``eps**gamma m**(1 - gamma)``.
    At every vertex the tube ends leave a radial divergence; a radial field removes
    it and leaves the vertex's net mass spread with the data kernel of radius
    ``eps**gamma``, so the divergence equals the smoothed graph divergence (as
    produced by :func:`mollify`).  A last vanishing-boundary solve takes up the
    rasterisation mismatch.
    """
    if not eps > 0:
        raise DomainError(f"eps must be positive, got {eps}")
    verts = g.vertices
    R_data = eps ** ep.gamma
    incident: Dict[int, List[Tuple[float, float]]] = {v: [] for v in range(len(verts))}
    ux = np.zeros((spec.nx + 1, spec.ny))
    uy = np.zeros((spec.nx, spec.ny + 1))
    for a, b, m in g.edges:
        R = float(ep.tube_radius(m, eps))
        bx, by = tube_faces(kernel, verts[a], verts[b], m, R, spec)
        _add_blocks(ux, uy, bx, by)
        incident[a].append((m, R))
        incident[b].append((-m, R))
    div_mu = graph_divergence(g)
    net = np.zeros(len(verts))
    for x, m in zip(div_mu.points, div_mu.masses):
        net[int(np.argmin(np.hypot(*(verts - x).T)))] += m
    radii = {v: max([R for _, R in parts] + [R_data]) * kernel.R_supp for v, parts in incident.items() if parts}
    ball = max(radii.values()) if radii else 0.0
    for v in radii:
        c = verts[v]
        if min(c[0], c[1], spec.Lx - c[0], spec.Ly - c[1]) < radii[v]:
            raise DomainError(f"vertex ball around {c} leaves the domain; decrease eps")
        for w in radii:
            if w > v and np.hypot(*(c - verts[w])) < radii[v] + radii[w]:
                raise DomainError("vertex balls overlap; decrease eps")
    for v, parts in incident.items():
        if not parts:
            continue
        src = list(parts)
        if net[v] != 0:
            src.append((-net[v], R_data))
        rec = _vertex_source(kernel, src, radii[v])
        w = rasterize_radial_flux(rec, verts[v], spec)
        ux -= w.ux
        uy -= w.uy
    ux[0] = ux[-1] = 0.0
    uy[:, 0] = uy[:, -1] = 0.0
    u = GridField(spec, ux, uy)
    target = mollify(div_mu, eps, ep, kernel, spec)
    resid = target.values - grid_divergence(u).values
    fix = dirichlet_divsolve(ScalarGrid(spec, resid - resid.mean()))
    u = u + fix
    e = malpha_eps(u, ep, eps, smoothing=EXACT)
    c0m = profile_c0(ep.beta) * malpha_graph(g, ep.alpha)
    l1 = field_norms(u, 1)
    gl1 = g.mass_measure()
    div = grid_divergence(u)
    tv = div.norm(1)
    gtv = div_mu.total_variation()
    scale = eps ** ep.gamma
    diag = RecoveryDiagnostics(
        eps=eps,
        energy=e,
        c0_malpha=c0m,
        gap=abs(e.total - c0m),
        l1=l1,
        graph_l1=gl1,
        C_l1=(l1 - gl1) / scale,
        tv_div=tv,
        graph_tv=gtv,
        tv_excess=(tv - gtv) / gtv if gtv > 0 else 0.0,
        C_div=scale * div.norm(2),
        C_gap=abs(e.total - c0m) / scale,
        ball_radius=ball,
        fix_linf=float(max(np.abs(fix.ux).max(), np.abs(fix.uy).max())),
    )
    logger.info("recovery eps=%.4g: E=%.6g c0M=%.6g gap=%.3g C_gap=%.3g", eps, e.total, c0m, diag.gap, diag.C_gap)
    return u, diag


def strip_density(u: GridField, ep: ExponentPack, eps: float, x0: float, x1: float) -> float:
    """Energy per unit length inside the vertical strip ``x0 <= x <= x1`` (rounded to cells)."""
    s = u.spec
    i0, i1 = int(round(x0 / s.hx)), int(round(x1 / s.hx))
    e = malpha_eps(u, ep, eps, window=(i0, i1, 0, s.ny), smoothing=EXACT)
    return e.total / ((i1 - i0) * s.hx)


def loglog_slope(x: Sequence[float], y: Sequence[float]) -> float:
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])


# ---------------------------------------------------------------------------
# convergence sweep


@dataclass(frozen=True)
class SweepSummary:
    oracle_energy: float
    c0: float
    reference: float
    final_ratio: float
    within: bool
    trending: bool
    graph: TransportGraph


def split_measure(mu: AtomicMeasure) -> Tuple[AtomicMeasure, AtomicMeasure]:
    m = mu.merged()
    return m.positive(), m.negative()


def gamma_sweep(
    mu: AtomicMeasure,
    spec: GridSpec,
    alpha: float,
    eps_list: Sequence[float],
    kernel: RadialKernel,
    steps_per_eps: int = 1500,
    band: Tuple[float, float] = (0.9, 1.1),
    schedule: Optional[Schedule] = None,
    on_stage=None,
) -> Tuple[List[SweepRow], SweepSummary, GridField]:
    """Continuation run on the smoothed data with the ratio to ``c0`` times the oracle cost.

    The data are re-smoothed at every stage's ``eps``.  A full ``schedule``
    overrides ``eps_list`` and ``steps_per_eps``.
    """
    ep = exponents(alpha, 2)
    src, snk = split_measure(mu)
    d_or, graph = gilbert_steiner_oracle(src, snk, alpha)
    c0 = profile_c0(ep.beta)
    ref = c0 * d_or
    sched = schedule if schedule is not None else Schedule(tuple(eps_list), steps_per_eps=steps_per_eps)
    u, rows = minimize_constrained(
        mollify(mu, sched.eps_list[0], ep, kernel, spec),
        ep,
        sched,
        reference=ref,
        data_for_eps=lambda e: mollify(mu, e, ep, kernel, spec),
        on_stage=on_stage,
    )
    ratios = [r.ratio for r in rows]
    dist = [abs(r - 1.0) for r in ratios]
    trending = all(b <= a + 0.02 for a, b in zip(dist, dist[1:]))
    final = ratios[-1]
    summary = SweepSummary(d_or, c0, ref, final, band[0] <= final <= band[1], trending, graph)
    logger.info("sweep: oracle %.6g, final ratio %.4f, within=%s trending=%s", d_or, final, summary.within, trending)
    return rows, summary, u


def section_flux(u: GridField, y: float, x_range: Optional[Tuple[float, float]] = None) -> float:
    """Net flux of ``u`` through the horizontal line at height ``y`` (nearest face row), upward positive."""
    s = u.spec
    j = int(round(y / s.hy))
    row = u.uy[:, j]
    if x_range is not None:
        xc = (np.arange(s.nx) + 0.5) * s.hx
        row = row[(xc >= x_range[0]) & (xc <= x_range[1])]
    return float(np.sum(row) * s.hx)

"""Exact small-scale transport: Wasserstein plans, a Steiner-tree oracle for the
branched cost, distance bands of a plan, and the banded upper bound for the
phase-field distance between two densities.
"""

from __future__ import annotations

import dataclasses
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog, minimize_scalar

from .core import (
    AtomicMeasure,
    DomainError,
    ExponentPack,
    GridField,
    GridSpec,
    ScalarGrid,
    SolverError,
    TransportGraph,
    embed_field,
    grid_divergence,
)
from .divsolve import dirichlet_divsolve
from .dyadic import local_field, rasterize_kernel
from .energy import EXACT, malpha_eps
from .profile import RadialKernel

logger = logging.getLogger(__name__)

MAX_LP_ATOMS = 400
ORACLE_MAX_ATOMS = 4
ORACLE_MAX_STEINER = 2
MASS_RTOL = 1e-9
ATOM_FLOOR = 1e-13
DEFAULT_BAND_EXPONENT = 0.5

Measure = Union[AtomicMeasure, ScalarGrid]


# ---------------------------------------------------------------------------
# Wasserstein distances


@dataclass(frozen=True)
class TransportPlan:
    """Coupling between two atomic measures, stored as weighted pairs."""

    sources: np.ndarray
    targets: np.ndarray
    masses: np.ndarray
    p: float
    cost_p: float
    source_index: np.ndarray
    target_index: np.ndarray

    @property
    def pairs(self) -> List[Tuple[np.ndarray, np.ndarray, float]]:
        return [(self.sources[k], self.targets[k], float(self.masses[k])) for k in range(len(self.masses))]

    @property
    def distances(self) -> np.ndarray:
        d = self.targets - self.sources
        return np.hypot(d[:, 0], d[:, 1])

    @property
    def total(self) -> float:
        return float(np.sum(self.masses))

    @property
    def value(self) -> float:
        return float(self.cost_p ** (1.0 / self.p))

    def first_moment(self) -> float:
        return float(np.sum(self.masses * self.distances))

    def reversed(self) -> "TransportPlan":
        return TransportPlan(self.targets, self.sources, self.masses, self.p, self.cost_p, self.target_index, self.source_index)


@dataclass(frozen=True)
class BlockAtoms:
    """Atoms obtained by summing a density over square blocks of cells."""

    measure: AtomicMeasure
    block: int
    block_ij: np.ndarray


def _check_p(p: float) -> None:
    if not p >= 1:
        raise DomainError(f"Wasserstein exponent must be >= 1, got {p}")


def _check_balance(a: float, b: float) -> None:
    if abs(a - b) > MASS_RTOL * max(abs(a), abs(b), 1e-300):
        raise DomainError(f"measures have different total masses ({a:.12g} vs {b:.12g})")


def grid_atoms(f: ScalarGrid, block: int) -> BlockAtoms:
    """Sum ``f`` over ``block x block`` cells; each block above the mass floor becomes an atom at its centroid.

    Blocks lighter than ``ATOM_FLOOR`` times the total are dropped; callers that
    need exact mass balance correct for them afterwards.
    """
    s = f.spec
    if s.nx % block or s.ny % block:
        raise DomainError(f"block {block} does not divide the grid {s.nx}x{s.ny}")
    if np.any(f.values < 0):
        raise DomainError("densities must be nonnegative")
    nbx, nby = s.nx // block, s.ny // block
    w = f.values.reshape(nbx, block, nby, block) * s.cell_area
    mass = w.sum(axis=(1, 3))
    X, Y = s.cell_centers()
    mx = (w * X.reshape(nbx, block, nby, block)).sum(axis=(1, 3))
    my = (w * Y.reshape(nbx, block, nby, block)).sum(axis=(1, 3))
    ij = np.argwhere(mass > ATOM_FLOOR * mass.sum())
    m = mass[ij[:, 0], ij[:, 1]]
    pts = np.column_stack([mx[ij[:, 0], ij[:, 1]] / m, my[ij[:, 0], ij[:, 1]] / m])
    return BlockAtoms(AtomicMeasure(pts, m), block, ij)


def choose_block(fs: Sequence[ScalarGrid], max_atoms: int = MAX_LP_ATOMS) -> int:
    """Smallest block size (a common divisor, doubling from 1) keeping the total atom count within budget."""
    s = fs[0].spec
    block = 1
    while True:
        if s.nx % block == 0 and s.ny % block == 0:
            nbx, nby = s.nx // block, s.ny // block
            count = 0
            for f in fs:
                mass = np.abs(f.values).reshape(nbx, block, nby, block).sum(axis=(1, 3))
                count += int(np.count_nonzero(mass > ATOM_FLOOR * mass.sum()))
            if count <= max_atoms:
                return block
        block *= 2
        if block > max(s.nx, s.ny):
            raise DomainError(f"cannot reduce the grids to {max_atoms} atoms")


def _as_atoms(mu: AtomicMeasure) -> AtomicMeasure:
    if np.any(mu.masses < 0):
        raise DomainError("transport marginals must be nonnegative")
    return mu.merged()


def solve_plan(mu_plus: AtomicMeasure, mu_minus: AtomicMeasure, p: float) -> TransportPlan:
    """Exact discrete optimal coupling by the HiGHS dual simplex (a vertex solution)."""
    _check_p(p)
    a, b = mu_plus.masses, mu_minus.masses
    ta, tb = float(a.sum()), float(b.sum())
    _check_balance(ta, tb)
    n, m = len(a), len(b)
    if n + m > MAX_LP_ATOMS:
        raise DomainError(f"{n + m} atoms exceed the exact solver budget of {MAX_LP_ATOMS}")
    if n == 0 or ta == 0:
        z = np.zeros((0, 2))
        return TransportPlan(z, z, np.zeros(0), p, 0.0, np.zeros(0, int), np.zeros(0, int))
    diff = mu_plus.points[:, None, :] - mu_minus.points[None, :, :]
    dist = np.hypot(diff[..., 0], diff[..., 1])
    scale = max(float(dist.max()), 1e-300)
    cost = (dist / scale) ** p
    an, bn = a / ta, b / tb
    rows = sp.kron(sp.eye(n), np.ones((1, m)))
    cols = sp.kron(np.ones((1, n)), sp.eye(m)).tocsr()
    A = sp.vstack([rows, cols[:-1]]).tocsr()  # one column constraint is redundant
    rhs = np.concatenate([an, bn[:-1]])
    res = linprog(
        cost.ravel(),
        A_eq=A,
        b_eq=rhs,
        bounds=(0, None),
        method="highs-ds",
        options={"presolve": False, "primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if res.status != 0:
        raise SolverError(f"transport linear program failed: {res.message}")
    x = np.clip(res.x.reshape(n, m), 0.0, None)
    # presolve is off: it misjudges feasibility when atom masses span many decades
    # polish the marginals: scale rows exactly, the column error is at solver tolerance
    rs = x.sum(axis=1)
    x *= np.where(rs > 0, an / np.where(rs > 0, rs, 1.0), 0.0)[:, None]
    x *= ta
    keep = np.argwhere(x > 1e-15 * ta)
    masses = x[keep[:, 0], keep[:, 1]]
    cost_p = float(np.sum(masses * dist[keep[:, 0], keep[:, 1]] ** p))
    return TransportPlan(
        mu_plus.points[keep[:, 0]],
        mu_minus.points[keep[:, 1]],
        masses,
        p,
        cost_p,
        keep[:, 0],
        keep[:, 1],
    )


def wasserstein(mu_plus: Measure, mu_minus: Measure, p: float, max_atoms: int = MAX_LP_ATOMS) -> Tuple[float, TransportPlan]:
    """``W_p`` between two nonnegative measures of equal mass, with its optimal plan.

    Grids are summed over the smallest common block size that brings the combined
    support within ``max_atoms``; each block is represented by its centroid.
    """
    _check_p(p)
    if isinstance(mu_plus, ScalarGrid) != isinstance(mu_minus, ScalarGrid):
        raise DomainError("both marginals must be grids or both atomic")
    if isinstance(mu_plus, ScalarGrid):
        if mu_plus.spec != mu_minus.spec:
            raise DomainError("grid marginals must share a grid")
        _check_balance(mu_plus.integral(), mu_minus.integral())
        block = choose_block([mu_plus, mu_minus], max_atoms)
        a = grid_atoms(mu_plus, block).measure
        b = grid_atoms(mu_minus, block).measure
    else:
        a, b = _as_atoms(mu_plus), _as_atoms(mu_minus)
    plan = solve_plan(a, b, p)
    return plan.value, plan


# ---------------------------------------------------------------------------
# Steiner-tree oracle


def _prufer_tree(seq: Sequence[int], n: int) -> List[Tuple[int, int]]:
    degree = [1] * n
    for v in seq:
        degree[v] += 1
    edges = []
    for v in seq:
        leaf = min(i for i in range(n) if degree[i] == 1)
        edges.append((leaf, v))
        degree[leaf] -= 1
        degree[v] -= 1
    u, w = [i for i in range(n) if degree[i] == 1]
    edges.append((u, w))
    return edges


def _edge_fluxes(edges: List[Tuple[int, int]], n: int, charge: np.ndarray) -> np.ndarray:
    """Signed mass carried from the first to the second endpoint of each tree edge."""
    adj: Dict[int, List[Tuple[int, int]]] = {i: [] for i in range(n)}
    for k, (a, b) in enumerate(edges):
        adj[a].append((b, k))
        adj[b].append((a, k))
    flux = np.zeros(len(edges))
    order, parent = [0], {0: (-1, -1)}
    for v in order:
        for w, k in adj[v]:
            if w not in parent:
                parent[w] = (v, k)
                order.append(w)
    sub = charge.copy()
    for v in reversed(order[1:]):
        pv, k = parent[v]
        sub[pv] += sub[v]
        a, _ = edges[k]
        flux[k] = sub[v] if a == v else -sub[v]
    return flux


def _weiszfeld(points: np.ndarray, n_term: int, edges, weights: np.ndarray, scale: float, max_iter: int = 20000) -> np.ndarray:
    """Block Weiszfeld iteration on the free (Steiner) vertices of a weighted tree."""
    pts = points.copy()
    free = range(n_term, len(pts))
    nbrs: Dict[int, List[Tuple[int, float]]] = {v: [] for v in free}
    for (a, b), w in zip(edges, weights):
        if a >= n_term:
            nbrs[a].append((b, w))
        if b >= n_term:
            nbrs[b].append((a, w))
    floor = 1e-14 * scale
    for _ in range(max_iter):
        move = 0.0
        for v in free:
            num = np.zeros(2)
            den = 0.0
            for u, w in nbrs[v]:
                d = max(float(np.hypot(*(pts[u] - pts[v]))), floor)
                num += w * pts[u] / d
                den += w / d
            if den == 0:
                continue
            new = num / den
            move = max(move, float(np.hypot(*(new - pts[v]))))
            pts[v] = new
        if move < 1e-13 * scale:
            break
    return pts


def _tree_cost(pts: np.ndarray, edges, weights: np.ndarray) -> float:
    return float(sum(w * np.hypot(*(pts[a] - pts[b])) for (a, b), w in zip(edges, weights)))


def _golden_polish(pts: np.ndarray, n_term: int, edges, weights: np.ndarray, scale: float, sweeps: int = 60) -> np.ndarray:
    """Coordinate descent by bounded scalar minimisation, for kinks the fixed point iteration crawls past."""
    pts = pts.copy()
    for _ in range(sweeps):
        before = _tree_cost(pts, edges, weights)
        for v in range(n_term, len(pts)):
            for c in (0, 1):
                x0 = pts[v, c]

                def obj(t, v=v, c=c):
                    pts[v, c] = t
                    return _tree_cost(pts, edges, weights)

                r = minimize_scalar(obj, bounds=(x0 - 0.1 * scale, x0 + 0.1 * scale), method="bounded", options={"xatol": 1e-12 * scale})
                pts[v, c] = r.x if r.fun <= obj(x0) else x0
        if before - _tree_cost(pts, edges, weights) <= 1e-14 * max(before, 1e-300):
            break
    return pts


@dataclass(frozen=True)
class OracleResult:
    energy: float
    graph: TransportGraph
    n_steiner: int
    topologies: int


def _contract(points: np.ndarray, edges, flux: np.ndarray, tol: float) -> TransportGraph:
    """Merge coincident vertices and orient each edge along its flux."""
    rep = list(range(len(points)))
    for i in range(len(points)):
        for j in range(i):
            if rep[j] == j and np.hypot(*(points[i] - points[j])) <= tol:
                rep[i] = j
                break
    acc: Dict[Tuple[int, int], float] = {}
    for (a, b), m in zip(edges, flux):
        ra, rb = rep[a], rep[b]
        if ra == rb:
            continue
        if ra > rb:
            ra, rb, m = rb, ra, -m
        acc[(ra, rb)] = acc.get((ra, rb), 0.0) + m
    used = sorted({v for k in acc for v in k} | {rep[i] for i in range(len(points))})
    index = {v: k for k, v in enumerate(used)}
    out = []
    for (a, b), m in sorted(acc.items()):
        if abs(m) <= 1e-14:
            continue
        out.append((index[a], index[b], m) if m > 0 else (index[b], index[a], -m))
    return TransportGraph(points[used], tuple(out))


def gilbert_steiner(sources: AtomicMeasure, sinks: AtomicMeasure, alpha: float) -> OracleResult:
    """Exhaustive search over trees on the terminals plus up to two branching points."""
    if not 0 < alpha <= 1:
        raise DomainError(f"alpha must lie in (0, 1], got {alpha}")
    if len(sources) + len(sinks) > ORACLE_MAX_ATOMS:
        raise DomainError(f"oracle scale only: {len(sources) + len(sinks)} atoms > {ORACLE_MAX_ATOMS}")
    if np.any(sources.masses < 0) or np.any(sinks.masses < 0):
        raise DomainError("sources and sinks must carry nonnegative masses")
    _check_balance(sources.total(), sinks.total())
    net = (sources - sinks).merged()
    term, charge = net.points, net.masses
    n = len(charge)
    if n == 0:
        return OracleResult(0.0, TransportGraph(np.zeros((0, 2)), ()), 0, 0)
    scale = max(net.diameter(), 1e-300)
    best = (math.inf, None, 0)
    count = 0
    for k in range(0, min(ORACLE_MAX_STEINER, max(n - 2, 0)) + 1):
        V = n + k
        ch = np.concatenate([charge, np.zeros(k)])
        seen = set()
        for seq in itertools.product(range(V), repeat=max(V - 2, 0)):
            if any(seq.count(s) < 2 for s in range(n, V)):
                continue  # branching points need degree three or more
            edges = _prufer_tree(seq, V) if V > 2 else [(0, 1)]
            key = frozenset(frozenset(e) for e in edges)
            if key in seen:
                continue
            seen.add(key)
            count += 1
            flux = _edge_fluxes(edges, V, ch)
            weights = np.abs(flux) ** alpha
            weights[np.abs(flux) <= 1e-15] = 0.0
            pts = np.vstack([term, np.zeros((k, 2))])
            for v in range(n, V):
                nb = [a if b == v else b for a, b in edges if v in (a, b) and (a if b == v else b) < n]
                pts[v] = term[nb].mean(axis=0) if nb else term.mean(axis=0)
            if k:
                pts = _weiszfeld(pts, n, edges, weights, scale)
                pts = _golden_polish(pts, n, edges, weights, scale)
            cost = _tree_cost(pts, edges, weights)
            if cost < best[0] - 1e-13 * scale:
                best = (cost, (pts, edges, flux), k)
    cost, (pts, edges, flux), k = best
    graph = _contract(pts, edges, flux, 1e-7 * scale)
    logger.debug("steiner oracle: %d topologies, best %.12g with %d branching points", count, cost, k)
    return OracleResult(float(cost), graph, k, count)


def gilbert_steiner_oracle(sources: AtomicMeasure, sinks: AtomicMeasure, alpha: float) -> Tuple[float, TransportGraph]:
    r = gilbert_steiner(sources, sinks, alpha)
    return r.energy, r.graph


# ---------------------------------------------------------------------------
# distance bands


@dataclass
class BandCell:
    band: int
    key: Tuple[int, int]
    side: float
    theta: float
    pairs: np.ndarray

    @property
    def lower_corner(self) -> np.ndarray:
        return np.array(self.key, dtype=float) * self.side

    def contains_targets(self, plan: TransportPlan, factor: float = 3.0) -> bool:
        """Targets lie in the concentric cube ``factor`` times larger than the cell."""
        c = self.lower_corner + 0.5 * self.side
        d = np.abs(plan.targets[self.pairs] - c)
        return bool(np.all(d <= 0.5 * factor * self.side * (1 + 1e-12)))

    def source_measure(self, plan: TransportPlan) -> AtomicMeasure:
        return AtomicMeasure(plan.sources[self.pairs], plan.masses[self.pairs])

    def target_measure(self, plan: TransportPlan) -> AtomicMeasure:
        return AtomicMeasure(plan.targets[self.pairs], plan.masses[self.pairs])


@dataclass
class Band:
    index: int
    d_lo: float
    d_hi: float
    theta: float
    pairs: np.ndarray
    cells: Dict[Tuple[int, int], BandCell] = field(default_factory=dict)

    def cell_count_bound(self, L: float) -> int:
        """Number of cells of the uniform partition of ``(0, L)^2`` at this band's cell size."""
        return int(math.ceil(L / self.d_hi - 1e-12)) ** 2


@dataclass
class BandDecomposition:
    w_band: float
    L: float
    total: float
    bands: List[Band]

    def band_mass(self) -> np.ndarray:
        return np.array([b.theta for b in self.bands])

    def weighted_distance(self) -> float:
        return float(sum(b.d_lo * b.theta for b in self.bands))

    def cells(self) -> List[BandCell]:
        return [c for b in self.bands for c in b.cells.values()]


def band_edges(w_band: float, j: int) -> Tuple[float, float]:
    return (2.0 ** j - 1.0) * w_band, (2.0 ** (j + 1) - 1.0) * w_band


def band_index(dist: np.ndarray, w_band: float) -> np.ndarray:
    j = np.floor(np.log2(dist / w_band + 1.0)).astype(int)
    j = np.maximum(j, 0)
    # guard the logarithm against rounding at the band edges
    lo = (2.0 ** j - 1.0) * w_band
    j = np.where(dist < lo, j - 1, j)
    hi = (2.0 ** (j + 1) - 1.0) * w_band
    return np.where(dist >= hi, j + 1, j)


def band_decompose(plan: TransportPlan, w_band: float, L: float) -> BandDecomposition:
    """Split a plan by displacement length into dyadic bands, then by source position into cells."""
    diam = math.sqrt(2.0) * L
    if not 0 < w_band < diam:
        raise DomainError(f"band width {w_band} must lie in (0, {diam})")
    dist = plan.distances
    j_of = band_index(dist, w_band) if len(dist) else np.zeros(0, int)
    bands = []
    for j in range(int(j_of.max()) + 1 if len(j_of) else 0):
        idx = np.flatnonzero(j_of == j)
        d_lo, d_hi = band_edges(w_band, j)
        band = Band(j, d_lo, d_hi, float(plan.masses[idx].sum()), idx)
        if len(idx):
            n_side = max(int(math.ceil(L / d_hi - 1e-12)), 1)
            keys = np.clip(np.floor(plan.sources[idx] / d_hi).astype(int), 0, n_side - 1)
            for key in sorted({tuple(k) for k in keys.tolist()}):
                sel = idx[np.all(keys == key, axis=1)]
                band.cells[key] = BandCell(j, key, d_hi, float(plan.masses[sel].sum()), sel)
        bands.append(band)
    return BandDecomposition(w_band, L, plan.total, bands)


# ---------------------------------------------------------------------------
# banded upper bound


@dataclass(frozen=True)
class UpperBound:
    field: GridField
    energy: float
    W1: float
    dirichlet_term: float
    w_band: float
    fallback: bool
    n_cells: int
    pad: int
    div_residual: float
    block: int
    decomposition: Optional[BandDecomposition]

    @property
    def spec(self) -> GridSpec:
        return self.field.spec


def _expand(coef: np.ndarray, block: int) -> np.ndarray:
    return np.kron(coef, np.ones((block, block)))


def _square_window(mask: np.ndarray, n: int) -> Tuple[int, int, int]:
    """Smallest power-of-two square (at least 8 cells, at most ``n``) covering ``mask``, kept inside the grid."""
    ii, jj = np.nonzero(mask)
    lo_i, hi_i, lo_j, hi_j = ii.min(), ii.max() + 1, jj.min(), jj.max() + 1
    need = max(hi_i - lo_i, hi_j - lo_j, 8)
    S = 1 << int(math.ceil(math.log2(need)))
    S = min(S, n)

    def place(lo, hi):
        start = lo - (S - (hi - lo)) // 2
        return int(min(max(start, 0), n - S))

    return place(lo_i, hi_i), place(lo_j, hi_j), S


def _reverse_order(a: ScalarGrid, b: ScalarGrid) -> bool:
    """Canonical order of a pair: the construction always runs with the first differing cell positive."""
    d = (a.values - b.values).ravel()
    nz = np.flatnonzero(d)
    return bool(len(nz) and d[nz[0]] < 0)


def _local_pair(fp: np.ndarray, fm: np.ndarray, spec: GridSpec, eps: float, ep: ExponentPack, kernel: RadialKernel):
    """Fields irrigating both window densities from the window centre; returns (field, pad) pairs."""
    out = []
    S = fp.shape[0]
    ws = GridSpec(S, S, S * spec.hx, S * spec.hy)
    for vals in (fp, fm):
        lf = local_field(ScalarGrid(ws, vals), eps, ep, kernel)
        pad = (lf.field.spec.nx - S) // 2
        out.append((lf.field, pad))
    return out


def dalpha_eps_upper_detail(
    f_plus: ScalarGrid,
    f_minus: ScalarGrid,
    eps: float,
    ep: ExponentPack,
    kernel: RadialKernel,
    band_exponent: float = DEFAULT_BAND_EXPONENT,
    max_atoms: int = MAX_LP_ATOMS,
    single_window: bool = False,
) -> UpperBound:
    """Constructive field with divergence ``f_plus - f_minus`` and its phase-field energy.

    Mass is coupled by an exact W1 plan between block atoms.  Plan pairs are grouped
    by displacement into bands of width ``w = W1/theta + F**band_exponent`` with
    ``F = eps**gamma2 * ||f_plus - f_minus||^2``, and by source position into cells
    of the band's length scale.  In every cell both the departing and the arriving
    mass are irrigated from the centre of a small square window; the two kernels at
    the centre cancel.  A final vanishing-boundary solve removes roundoff and the
    lifting error, so the divergence constraint holds exactly on the returned grid.
    When ``w`` reaches the cube side, a single window covering the cube is used.
    """
    spec = f_plus.spec
    if f_minus.spec != spec:
        raise DomainError("densities must share a grid")
    if spec.nx != spec.ny or abs(spec.Lx - spec.Ly) > 1e-12 * spec.Lx:
        raise DomainError("the upper bound needs a square grid of square cells")
    if np.any(f_plus.values < 0) or np.any(f_minus.values < 0):
        raise DomainError("densities must be nonnegative")
    _check_balance(f_plus.integral(), f_minus.integral())
    if _reverse_order(f_plus, f_minus):
        r = dalpha_eps_upper_detail(f_minus, f_plus, eps, ep, kernel, band_exponent, max_atoms, single_window)
        return dataclasses.replace(r, field=-r.field)
    n, L = spec.nx, spec.Lx
    common = np.minimum(f_plus.values, f_minus.values)
    gp, gm = f_plus.values - common, f_minus.values - common
    theta = float(gp.sum() * spec.cell_area)
    diff = gp - gm
    F = eps ** ep.gamma2 * float(np.sum(diff * diff) * spec.cell_area)
    if theta <= 1e-14 * max(f_plus.integral(), 1e-300):
        return UpperBound(spec.zeros_field(), 0.0, 0.0, F, 0.0, False, 0, 0, 0.0, 1, None)

    Gp, Gm = ScalarGrid(spec, gp), ScalarGrid(spec, gm)
    block = choose_block([Gp, Gm], max_atoms)
    ap, am = grid_atoms(Gp, block), grid_atoms(Gm, block)
    plan = solve_plan(ap.measure, am.measure, 1.0)
    W1 = plan.cost_p
    w_band = W1 / theta + F ** band_exponent
    nb = n // block
    mass_p = np.zeros((nb, nb))
    mass_p[ap.block_ij[:, 0], ap.block_ij[:, 1]] = ap.measure.masses
    mass_m = np.zeros((nb, nb))
    mass_m[am.block_ij[:, 0], am.block_ij[:, 1]] = am.measure.masses

    fallback = single_window or w_band >= L
    decomposition = None
    if fallback:
        groups = [np.arange(len(plan.masses))]
    else:
        decomposition = band_decompose(plan, w_band, L)
        groups = [c.pairs for c in decomposition.cells()]

    pieces = []
    for pairs in groups:
        cp = np.zeros((nb, nb))
        cm = np.zeros((nb, nb))
        si, ti = plan.source_index[pairs], plan.target_index[pairs]
        np.add.at(cp, (ap.block_ij[si, 0], ap.block_ij[si, 1]), plan.masses[pairs])
        np.add.at(cm, (am.block_ij[ti, 0], am.block_ij[ti, 1]), plan.masses[pairs])
        cp = np.divide(cp, mass_p, out=np.zeros_like(cp), where=mass_p > 0)
        cm = np.divide(cm, mass_m, out=np.zeros_like(cm), where=mass_m > 0)
        fp = _expand(cp, block) * gp
        fm = _expand(cm, block) * gm
        if fallback:
            i0, j0, S = 0, 0, n
        else:
            i0, j0, S = _square_window((fp > 0) | (fm > 0), n)
        win = (slice(i0, i0 + S), slice(j0, j0 + S))
        for (u, pad), sign in zip(_local_pair(fp[win], fm[win], spec, eps, ep, kernel), (1.0, -1.0)):
            pieces.append((u, pad, i0, j0, sign))

    P = max((p for _, p, *_ in pieces), default=0)
    N = n + 2 * P
    big = GridSpec(N, N, N * spec.hx, N * spec.hy)
    ux = np.zeros((N + 1, N))
    uy = np.zeros((N, N + 1))
    for u, pad, i0, j0, sign in pieces:
        e = embed_field(u, big, i0 + P - pad, j0 + P - pad)
        ux += sign * e.ux
        uy += sign * e.uy
    U = GridField(big, ux, uy)
    target = np.zeros((N, N))
    target[P:P + n, P:P + n] = diff
    resid = target - grid_divergence(U).values
    if np.any(resid):
        U = U + dirichlet_divsolve(ScalarGrid(big, resid - resid.mean()))
    final = float(np.max(np.abs(target - grid_divergence(U).values)))
    energy = malpha_eps(U, ep, eps, smoothing=EXACT).total
    logger.info(
        "upper bound: W1=%.4g F=%.4g w=%.4g fallback=%s cells=%d pad=%d energy=%.5g resid=%.1e",
        W1, F, w_band, fallback, len(groups), P, energy, final,
    )
    return UpperBound(U, energy, W1, F, w_band, fallback, len(groups), P, final, block, decomposition)


def dalpha_eps_upper_best(
    f_plus: ScalarGrid,
    f_minus: ScalarGrid,
    eps: float,
    ep: ExponentPack,
    kernel: RadialKernel,
    band_exponent: float = DEFAULT_BAND_EXPONENT,
) -> UpperBound:
    """Lower of the banded and the single-window constructions; both are admissible fields."""
    banded = dalpha_eps_upper_detail(f_plus, f_minus, eps, ep, kernel, band_exponent)
    if banded.fallback or banded.n_cells == 0:
        return banded
    single = dalpha_eps_upper_detail(f_plus, f_minus, eps, ep, kernel, band_exponent, single_window=True)
    return single if single.energy < banded.energy else banded


def dalpha_eps_upper(
    f_plus: ScalarGrid,
    f_minus: ScalarGrid,
    eps: float,
    ep: ExponentPack,
    kernel: RadialKernel,
    band_exponent: float = DEFAULT_BAND_EXPONENT,
) -> Tuple[GridField, float]:
    r = dalpha_eps_upper_best(f_plus, f_minus, eps, ep, kernel, band_exponent)
    return r.field, r.energy


# ---------------------------------------------------------------------------
# bound fitting and the oracle suite


@dataclass(frozen=True)
class ShapeFit:
    C: float
    lam: float
    spread: float


def shape_function(x, lam: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x + x ** lam


def fit_bound_shape(x: Sequence[float], y: Sequence[float]) -> ShapeFit:
    """Pick ``lam`` in (0, 1) making ``y / (x + x**lam)`` as uniform as possible, then the smallest valid ``C``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(x <= 0) or np.any(y < 0):
        raise DomainError("bound fit needs positive abscissae and nonnegative values")
    pos = y > 0

    def spread(lam):
        r = y[pos] / shape_function(x[pos], lam)
        return float(np.log(r.max() / r.min())) if pos.any() else 0.0

    grid = np.linspace(0.02, 0.98, 49)
    k = int(np.argmin([spread(l) for l in grid]))
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
    res = minimize_scalar(spread, bounds=(lo, hi), method="bounded", options={"xatol": 1e-6})
    lam = float(res.x) if res.fun <= spread(grid[k]) else float(grid[k])
    ratios = y / shape_function(x, lam)
    return ShapeFit(float(ratios.max()), lam, float(math.exp(spread(lam))))


def rasterize_atoms(mu: AtomicMeasure, R: float, kernel: RadialKernel, spec: GridSpec) -> ScalarGrid:
    """Sum of kernels of radius ``R`` carrying the atom masses (signs kept)."""
    out = np.zeros((spec.nx, spec.ny))
    for x, m in zip(mu.points, mu.masses):
        if m != 0:
            out += np.sign(m) * rasterize_kernel(kernel, x, R, abs(m), spec).values
    return ScalarGrid(spec, out)


@dataclass(frozen=True)
class SuiteRow:
    instance: int
    W1: float
    Wp: float
    dalpha_oracle: float
    upper_eps: float
    C_fit: float
    lower_ok: bool
    upper_ok: bool
    triangle_ok: bool

    @property
    def passed(self) -> bool:
        return self.lower_ok and self.upper_ok and self.triangle_ok

    def as_row(self) -> Dict[str, object]:
        return {
            "instance": self.instance,
            "W1": self.W1,
            "Wp": self.Wp,
            "dalpha_oracle": self.dalpha_oracle,
            "upper_eps": self.upper_eps,
            "C_fit": self.C_fit,
            "pass": int(self.passed),
        }


SUITE_COLUMNS = ("instance", "W1", "Wp", "dalpha_oracle", "upper_eps", "C_fit", "pass")


@dataclass(frozen=True)
class SuiteReport:
    alpha: float
    rows: List[SuiteRow]
    C_fit: float
    spread: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)


def random_instance(rng: np.random.Generator, n_atoms: int = 4, box: Tuple[float, float] = (0.2, 0.8)) -> Tuple[AtomicMeasure, AtomicMeasure]:
    """Random unit-mass source/sink split of ``n_atoms`` points in a sub-square."""
    pts = rng.uniform(box[0], box[1], size=(n_atoms, 2))
    n_src = int(rng.integers(1, n_atoms))
    a = rng.uniform(0.2, 1.0, size=n_src)
    b = rng.uniform(0.2, 1.0, size=n_atoms - n_src)
    return AtomicMeasure(pts[:n_src], a / a.sum()), AtomicMeasure(pts[n_src:], b / b.sum())


def bound_suite(
    instances: Sequence[Tuple[AtomicMeasure, AtomicMeasure]],
    alpha: float,
    ep: Optional[ExponentPack] = None,
    eps: Optional[float] = None,
    kernel: Optional[RadialKernel] = None,
    spec: Optional[GridSpec] = None,
) -> SuiteReport:
    """Check ``W_{1/alpha} <= d_alpha <= C W1^(2 alpha - 1)`` with one fitted ``C`` per suite.

    With ``eps`` and a kernel given, each instance is also smoothed onto ``spec`` and
    the two-step chain through the midpoint mixture is checked against the
    pseudo-triangle inequality using constructed upper bounds.
    """
    recs = []
    for src, snk in instances:
        W1, _ = wasserstein(src, snk, 1.0)
        Wp, _ = wasserstein(src, snk, 1.0 / alpha)
        d_or, _ = gilbert_steiner_oracle(src, snk, alpha)
        recs.append((W1, Wp, d_or))
    expo = 2.0 * alpha - 1.0
    ratios = [d / W1 ** expo for W1, _, d in recs if W1 > 0]
    C = max(ratios) if ratios else 0.0
    spread = max(ratios) / min(ratios) if ratios else 1.0
    rows = []
    smoothing = eps is not None
    if smoothing and (ep is None or kernel is None or spec is None):
        raise DomainError("smoothed checks need exponents, a kernel and a grid")
    for k, ((src, snk), (W1, Wp, d_or)) in enumerate(zip(instances, recs)):
        upper = float("nan")
        tri = True
        if smoothing:
            R = eps ** ep.gamma
            f0 = rasterize_atoms(src, R, kernel, spec)
            f2 = rasterize_atoms(snk, R, kernel, spec)
            f1 = ScalarGrid(spec, 0.5 * (f0.values + f2.values))
            upper = dalpha_eps_upper(f0, f2, eps, ep, kernel)[1]
            d01 = dalpha_eps_upper(f0, f1, eps, ep, kernel)[1]
            d12 = dalpha_eps_upper(f1, f2, eps, ep, kernel)[1]
            tri = upper <= 2.0 * (d01 + d12) * (1 + 1e-12)
        rows.append(
            SuiteRow(
                k, W1, Wp, d_or, upper, C,
                lower_ok=Wp <= d_or * (1 + 1e-9) + 1e-12,
                upper_ok=d_or <= C * W1 ** expo * (1 + 1e-12),
                triangle_ok=tri,
            )
        )
    return SuiteReport(alpha, rows, C, spread)

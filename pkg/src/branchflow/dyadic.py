"""Dyadic descent of a square, the diffusion level, and the local irrigation field.

A nonnegative density on ``(0, L)^2`` is summarised cube by cube.  Each cube ``Q``
carries its mass ``theta_Q`` and a radial kernel of radius
``R_Q = eps**gamma * theta_Q**(1 - gamma)`` centred at its centre.  The diffusion
level is the largest ancestry- and sibling-closed family of cubes whose kernels
fit inside them.  Mass is routed along the tree from the minimal cubes to the
root centre by kernel-smoothed tubes; the mismatch at every node is removed with
a radial correction, and the remainder inside each minimal cube is diffused.
"""

from __future__ import annotations

import functools
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .core import (
    BranchError,
    DomainError,
    ExponentPack,
    GridField,
    GridSpec,
    ScalarGrid,
    TransportGraph,
    AtomicMeasure,
    field_norms,
    grid_divergence,
)
from .divsolve import (
    RadialField,
    dirichlet_divsolve,
    dirichlet_divsolve_batch,
    radial_divsolve,
    rasterize_radial_flux,
)
from .energy import EXACT, EnergyBreakdown, malpha_eps
from .profile import RadialKernel

logger = logging.getLogger(__name__)

MIN_CELLS = 4
N_SHELLS = 512
FIT_RTOL = 1e-12
NODE_BALL_FACTOR = math.sqrt(2.0)
MAX_OVERSIZED_CELLS = 1024


# ---------------------------------------------------------------------------
# tree


@dataclass(frozen=True)
class CubeRecord:
    gen: int
    ix: int
    iy: int
    center: Tuple[float, float]
    side: float
    theta: float
    radius: float
    in_level: bool
    is_minimal: bool
    truncated: bool
    parent_center: Optional[Tuple[float, float]]

    @property
    def diam(self) -> float:
        return self.side * math.sqrt(2.0)


@dataclass
class DyadicTree:
    """Per-generation arrays of a dyadic descent down to ``max_depth``.

    ``theta[j]`` has shape ``(2**j, 2**j)``; ``in_level[j]`` and ``minimal[j]`` are
    boolean masks of the same shape.  ``truncated[j]`` marks minimal cubes whose
    children all fit but lie below the grid resolution.
    """

    f: ScalarGrid
    eps: float
    ep: ExponentPack
    kernel: RadialKernel
    max_depth: int
    theta: List[np.ndarray]
    in_level: List[np.ndarray]
    minimal: List[np.ndarray]
    truncated: List[np.ndarray]

    @property
    def L(self) -> float:
        return self.f.spec.Lx

    @property
    def total(self) -> float:
        return float(self.theta[0][0, 0])

    @property
    def empty(self) -> bool:
        return not bool(self.in_level[0][0, 0])

    @property
    def depth(self) -> int:
        """Deepest generation that reaches the diffusion level (-1 when it is empty)."""
        return max((j for j in range(self.max_depth + 1) if self.in_level[j].any()), default=-1)

    def side(self, j: int) -> float:
        return self.L / 2 ** j

    def cells_per_side(self, j: int) -> int:
        return self.f.spec.nx >> j

    def radius(self, j: int) -> np.ndarray:
        return kernel_radius(self.theta[j], self.eps, self.ep)

    def centers(self, j: int) -> Tuple[np.ndarray, np.ndarray]:
        c = (np.arange(2 ** j) + 0.5) * self.side(j)
        return np.meshgrid(c, c, indexing="ij")

    def window(self, j: int, a: int, b: int) -> Tuple[int, int, int, int]:
        m = self.cells_per_side(j)
        return (a * m, (a + 1) * m, b * m, (b + 1) * m)

    def frontier(self, j: int) -> np.ndarray:
        """Cubes of the level that are not minimal (their children are in the level)."""
        return self.in_level[j] & ~self.minimal[j]

    def record(self, j: int, a: int, b: int) -> CubeRecord:
        s = self.side(j)
        center = ((a + 0.5) * s, (b + 0.5) * s)
        parent = None
        if j > 0:
            ps = 2 * s
            parent = ((a // 2 + 0.5) * ps, (b // 2 + 0.5) * ps)
        th = float(self.theta[j][a, b])
        return CubeRecord(
            gen=j,
            ix=a,
            iy=b,
            center=center,
            side=s,
            theta=th,
            radius=float(kernel_radius(th, self.eps, self.ep)),
            in_level=bool(self.in_level[j][a, b]),
            is_minimal=bool(self.minimal[j][a, b]),
            truncated=bool(self.truncated[j][a, b]),
            parent_center=parent,
        )

    def cubes(self, mask_name: str = "in_level") -> Iterator[CubeRecord]:
        for j in range(self.max_depth + 1):
            mask = getattr(self, mask_name)[j] if mask_name != "frontier" else self.frontier(j)
            for a, b in zip(*np.nonzero(mask)):
                yield self.record(j, int(a), int(b))

    def minimal_cubes(self) -> List[CubeRecord]:
        return list(self.cubes("minimal"))

    def to_json(self) -> Dict:
        cubes = [
            {
                "gen": c.gen,
                "ix": c.ix,
                "iy": c.iy,
                "center": list(c.center),
                "side": c.side,
                "theta": c.theta,
                "radius": c.radius,
                "minimal": c.is_minimal,
                "truncated": c.truncated,
            }
            for c in self.cubes()
        ]
        return {
            "L": self.L,
            "n": self.f.spec.nx,
            "eps": self.eps,
            "alpha": self.ep.alpha,
            "R_supp": self.kernel.R_supp,
            "max_depth": self.max_depth,
            "depth": self.depth,
            "empty": self.empty,
            "cubes": cubes,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1)


def kernel_radius(theta, eps: float, ep: ExponentPack):
    if ep.d != 2:
        raise DomainError("the dyadic construction is implemented for d=2")
    return ep.tube_radius(np.maximum(theta, 0.0), eps)


def _fits(theta: np.ndarray, side: float, eps: float, ep: ExponentPack, R_supp: float) -> np.ndarray:
    """Kernel support inscribed in the cube; empty cubes fit vacuously."""
    reach = kernel_radius(theta, eps, ep) * R_supp
    return (theta <= 0) | (reach <= 0.5 * side * (1 + FIT_RTOL))


def _block_sum(a: np.ndarray) -> np.ndarray:
    n = a.shape[0] // 2
    return a.reshape(n, 2, n, 2).sum(axis=(1, 3))


def _max_depth(n: int) -> int:
    j = 0
    while n % 2 ** (j + 1) == 0 and n // 2 ** (j + 1) >= MIN_CELLS:
        j += 1
    return j


def build_tree(f: ScalarGrid, eps: float, ep: ExponentPack, kernel: RadialKernel) -> DyadicTree:
    """Dyadic descent of ``f`` with diffusion-level and minimal-cube flags.

    The root is admitted when its kernel fits; the four children of an admitted
    cube are admitted together when every one of them fits.  Descent stops at the
    first failing sibling set, at empty cubes, or when cubes would be narrower
    than ``MIN_CELLS`` grid cells.
    """
    s = f.spec
    if s.nx != s.ny or abs(s.Lx - s.Ly) > 1e-12 * s.Lx:
        raise DomainError("dyadic descent needs a square grid on a square")
    if not eps > 0:
        raise DomainError(f"eps must be positive, got {eps}")
    if np.any(f.values < -1e-14 * max(np.abs(f.values).max(), 1e-300)):
        raise DomainError("density must be nonnegative")
    vals = np.maximum(f.values, 0.0)
    J = _max_depth(s.nx)
    cell_mass = vals * s.cell_area
    m = s.nx >> J
    theta = [None] * (J + 1)
    theta[J] = cell_mass.reshape(2 ** J, m, 2 ** J, m).sum(axis=(1, 3))
    for j in range(J - 1, -1, -1):
        theta[j] = _block_sum(theta[j + 1])
    L = s.Lx
    fits = [_fits(theta[j], L / 2 ** j, eps, ep, kernel.R_supp) for j in range(J + 1)]
    in_level = [np.zeros_like(fits[j]) for j in range(J + 1)]
    in_level[0] = fits[0].copy()
    for j in range(1, J + 1):
        parent_ok = in_level[j - 1] & (theta[j - 1] > 0)
        all_fit = _block_sum(fits[j].astype(int)) == 4
        admit = parent_ok & all_fit
        in_level[j] = np.repeat(np.repeat(admit, 2, axis=0), 2, axis=1)
    minimal, truncated = [], []
    for j in range(J + 1):
        if j < J:
            kids = _block_sum(in_level[j + 1].astype(int)) > 0
            mn = in_level[j] & ~kids
            # children would fit but are below resolution only at the last generation
            tr = np.zeros_like(mn)
        else:
            mn = in_level[j].copy()
            tr = mn & (theta[j] > 0)
        minimal.append(mn)
        truncated.append(tr)
    tree = DyadicTree(f, float(eps), ep, kernel, J, theta, in_level, minimal, truncated)
    logger.debug("dyadic tree: depth %d of %d, %d minimal cubes", tree.depth, J, sum(int(m.sum()) for m in minimal))
    return tree


def uniform_depth(theta: float, L: float, eps: float, ep: ExponentPack, R_supp: float, max_depth: int) -> int:
    """Deepest generation of the level for a constant density (-1 when the root fails)."""
    depth = -1
    for j in range(max_depth + 1):
        reach = eps ** ep.gamma * (theta * 4.0 ** -j) ** (1 - ep.gamma) * R_supp
        if reach <= L * 2.0 ** -j / 2 * (1 + FIT_RTOL):
            depth = j
        else:
            break
    return depth


def min_side_bound(eta: float, eps: float, ep: ExponentPack, R_supp: float) -> float:
    """Smallest side a level cube can have when the density is at least ``eta`` everywhere."""
    return (2 * R_supp * eps ** ep.gamma * eta ** (1 - ep.gamma)) ** (1.0 / (2 * ep.gamma - 1))


# ---------------------------------------------------------------------------
# atomic and smooth approximations


@functools.lru_cache(maxsize=None)
def _gauss(m: int) -> Tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre rule on ``[0, 1]``."""
    x, w = np.polynomial.legendre.leggauss(m)
    t, wt = 0.5 * (x + 1.0), 0.5 * w
    t.setflags(write=False)
    wt.setflags(write=False)
    return t, wt


def kernel_cells(kernel: RadialKernel, center, R: float, theta: float, spec: GridSpec):
    """Cell averages of ``theta R^-2 rho(|x - c| / R)`` on the cells meeting its support.

    Returns ``(i0, j0, block)``; the block integrates to ``theta`` exactly.  Kernels
    narrower than an eighth of a cell are deposited bilinearly.
    """
    cx, cy = center
    h = min(spec.hx, spec.hy)
    reach = R * kernel.R_supp
    if theta == 0:
        return 0, 0, np.zeros((0, 0))
    if reach < h / 8:
        gx = cx / spec.hx - 0.5
        gy = cy / spec.hy - 0.5
        a, b = int(np.floor(gx)), int(np.floor(gy))
        tx, ty = gx - a, gy - b
        w = np.outer([1 - tx, tx], [1 - ty, ty])
        block = np.zeros((2, 2))
        ia = np.clip([a, a + 1], 0, spec.nx - 1)
        jb = np.clip([b, b + 1], 0, spec.ny - 1)
        i0, j0 = int(ia.min()), int(jb.min())
        block = np.zeros((int(ia.max()) - i0 + 1, int(jb.max()) - j0 + 1))
        for p in range(2):
            for q in range(2):
                block[ia[p] - i0, jb[q] - j0] += w[p, q]
        return i0, j0, block * theta / (block.sum() * spec.cell_area)
    i0 = max(int(np.floor((cx - reach) / spec.hx + 1e-9)), 0)
    i1 = min(int(np.ceil((cx + reach) / spec.hx - 1e-9)), spec.nx)
    j0 = max(int(np.floor((cy - reach) / spec.hy + 1e-9)), 0)
    j1 = min(int(np.ceil((cy + reach) / spec.hy - 1e-9)), spec.ny)
    m = int(np.clip(np.ceil(6 * h / reach), 4, 48))
    t, w = _gauss(m)
    xs = ((np.arange(i0, i1)[:, None] + t[None, :]) * spec.hx - cx).ravel()
    ys = ((np.arange(j0, j1)[:, None] + t[None, :]) * spec.hy - cy).ravel()
    vals = kernel(np.hypot(xs[:, None], ys[None, :]) / R)
    ww = np.tile(w, i1 - i0)
    wv = np.tile(w, j1 - j0)
    vals = (vals * ww[:, None] * wv[None, :]).reshape(i1 - i0, m, j1 - j0, m).sum(axis=(1, 3))
    tot = vals.sum()
    if tot <= 0:
        raise DomainError("kernel rasterization produced no mass")
    return i0, j0, vals * theta / (tot * spec.cell_area)


def rasterize_kernel(kernel: RadialKernel, center, R: float, theta: float, spec: GridSpec) -> ScalarGrid:
    out = np.zeros((spec.nx, spec.ny))
    i0, j0, block = kernel_cells(kernel, center, R, theta, spec)
    out[i0:i0 + block.shape[0], j0:j0 + block.shape[1]] += block
    return ScalarGrid(spec, out)


def lambda_eps(tree: DyadicTree) -> Tuple[ScalarGrid, AtomicMeasure]:
    """Kernel sum over the minimal cubes (root kernel when the level is empty) and the atoms at their centres."""
    spec = tree.f.spec
    out = np.zeros((spec.nx, spec.ny))
    pts, ms = [], []
    if tree.empty:
        cubes = [tree.record(0, 0, 0)]
    else:
        cubes = [c for c in tree.minimal_cubes()]
    for c in cubes:
        if c.theta <= 0:
            continue
        i0, j0, block = kernel_cells(tree.kernel, c.center, c.radius, c.theta, spec)
        out[i0:i0 + block.shape[0], j0:j0 + block.shape[1]] += block
        pts.append(c.center)
        ms.append(c.theta)
    atoms = AtomicMeasure(np.array(pts).reshape(-1, 2), np.array(ms))
    return ScalarGrid(spec, out), atoms


# ---------------------------------------------------------------------------
# graph field and the dyadic sum


def xia_field(tree: DyadicTree) -> TransportGraph:
    """Edges from every nonempty child centre to its parent centre inside the level.

    The graph divergence is the atoms at the minimal centres minus the root atom.
    """
    if tree.empty:
        raise BranchError("diffusion level is empty; use the oversized-kernel branch")
    verts: List[Tuple[float, float]] = []
    index: Dict[Tuple[int, int, int], int] = {}

    def vid(j, a, b):
        key = (j, a, b)
        if key not in index:
            s = tree.side(j)
            index[key] = len(verts)
            verts.append(((a + 0.5) * s, (b + 0.5) * s))
        return index[key]

    edges = []
    vid(0, 0, 0)
    for j in range(1, tree.max_depth + 1):
        mask = tree.in_level[j] & (tree.theta[j] > 0)
        for a, b in zip(*np.nonzero(mask)):
            a, b = int(a), int(b)
            edges.append((vid(j, a, b), vid(j - 1, a // 2, b // 2), float(tree.theta[j][a, b])))
    return TransportGraph(np.array(verts), edges)


def dyadic_sum_check(tree: DyadicTree, lam: float) -> float:
    """Largest ratio of ``sum theta^lam diam`` over all descendants (the cube included) to the cube's own term.

    The sum runs over the complete descent down to the finest generation.
    """
    if not (1 - 1 / tree.ep.d < lam <= 1):
        raise DomainError(f"lam must lie in (1 - 1/d, 1], got {lam}")
    J = tree.max_depth
    diam = [tree.side(j) * math.sqrt(2.0) for j in range(J + 1)]
    own = [np.where(tree.theta[j] > 0, np.maximum(tree.theta[j], 0.0) ** lam, 0.0) * diam[j] for j in range(J + 1)]
    acc = own[J].copy()
    best = 1.0 if np.any(own[J] > 0) else 0.0
    for j in range(J - 1, -1, -1):
        acc = own[j] + _block_sum(acc)
        pos = own[j] > 0
        if np.any(pos):
            best = max(best, float(np.max(acc[pos] / own[j][pos])))
    return best


def geometric_constant(lam: float, d: int = 2) -> float:
    """Sum over generations of ``2^{j(d - 1 - lam d)}``."""
    return 1.0 / (1.0 - 2.0 ** (d - 1 - lam * d))


# ---------------------------------------------------------------------------
# tube fields


class _LineTable:
    """Partial line integrals of the unit kernel with bilinear lookup."""

    def __init__(self, kernel: RadialKernel):
        self.delta, self.sigma, self.P, self.marg, self.cum = kernel.line_table()
        self.R_supp = kernel.R_supp
        self.dd = float(self.delta[1] - self.delta[0])
        self.ds = float(self.sigma[1] - self.sigma[0])

    def partial(self, dl: np.ndarray, sg: np.ndarray) -> np.ndarray:
        dl = np.abs(dl)
        outside = dl >= self.R_supp
        fd = np.clip(dl / self.dd, 0.0, len(self.delta) - 1.000001)
        fs = np.clip((sg + self.R_supp) / self.ds, 0.0, len(self.sigma) - 1.000001)
        i = fd.astype(int)
        k = fs.astype(int)
        ti = fd - i
        tk = fs - k
        P = self.P
        v = (
            (1 - ti) * ((1 - tk) * P[i, k] + tk * P[i, k + 1])
            + ti * ((1 - tk) * P[i + 1, k] + tk * P[i + 1, k + 1])
        )
        return np.where(outside, 0.0, v)

    def odd_cumulative(self, u: np.ndarray) -> np.ndarray:
        """``int_0^u`` of the projected kernel (exact for its linear interpolant), odd in ``u``."""
        a = np.minimum(np.abs(u), self.R_supp)
        k = np.minimum((a / self.dd).astype(int), len(self.delta) - 2)
        t = a - self.delta[k]
        m0 = self.marg[k]
        m1 = self.marg[k + 1]
        return np.sign(u) * (self.cum[k] + m0 * t + (m1 - m0) * t * t / (2 * self.dd))


_tables: Dict[int, _LineTable] = {}


def _table(kernel: RadialKernel) -> _LineTable:
    key = id(kernel)
    tab = _tables.get(key)
    if tab is None or tab.P is not kernel.line_table()[2]:
        tab = _LineTable(kernel)
        _tables[key] = tab
    return tab


def _tube_axis_faces(tab: _LineTable, A, n, ell, theta, R, spec, vertical: bool):
    """Face averages of one component of a tube field on the faces in its bounding box.

    ``vertical`` selects the x-normal faces (``ux``); otherwise the y-normal faces.
    Faces whose whole extent sees the full chord of the kernel use the exact
    cumulative-marginal formula; the others use Gauss points.
    """
    reach = R * tab.R_supp
    B = (A[0] + ell * n[0], A[1] + ell * n[1])
    lo = (min(A[0], B[0]) - reach, min(A[1], B[1]) - reach)
    hi = (max(A[0], B[0]) + reach, max(A[1], B[1]) + reach)
    if vertical:
        h_n, h_t, N_n, N_t = spec.hx, spec.hy, spec.nx, spec.ny
        lo_n, hi_n, lo_t, hi_t = lo[0], hi[0], lo[1], hi[1]
        a_n, a_t = A[0], A[1]
        comp = n[0]
    else:
        h_n, h_t, N_n, N_t = spec.hy, spec.hx, spec.ny, spec.nx
        lo_n, hi_n, lo_t, hi_t = lo[1], hi[1], lo[0], hi[0]
        a_n, a_t = A[1], A[0]
        comp = n[1]
    i0 = max(int(np.floor(lo_n / h_n)), 0)
    i1 = min(int(np.ceil(hi_n / h_n)), N_n)
    j0 = max(int(np.floor(lo_t / h_t)), 0)
    j1 = min(int(np.ceil(hi_t / h_t)), N_t)
    if i0 > i1 or j0 >= j1 or comp == 0.0:
        return i0, j0, np.zeros((0, 0))
    pn = np.arange(i0, i1 + 1) * h_n - a_n
    pt = np.arange(j0, j1 + 1) * h_t - a_t
    if vertical:
        ex, ey = pn[:, None], pt[None, :]
    else:
        ex, ey = pt[None, :], pn[:, None]
    sig = ex * n[0] + ey * n[1]
    dls = ex * n[1] - ey * n[0]
    # faces run between consecutive tangential nodes
    s0, s1 = sig[:, :-1], sig[:, 1:]
    d0, d1 = dls[:, :-1], dls[:, 1:]
    full = (np.minimum(s0, s1) >= reach) & (np.maximum(s0, s1) <= ell - reach)
    W = tab.odd_cumulative
    if vertical:
        exact = theta / h_t * (W(d0 / R) - W(d1 / R))
    else:
        exact = theta / h_t * (W(d1 / R) - W(d0 / R))
    vals = np.where(full, exact, 0.0)
    rest = ~full
    if rest.any():
        h = min(spec.hx, spec.hy)
        m = int(np.clip(np.ceil(4 * h / reach), 4, 64))
        t, w = _gauss(m)
        ii, jj = np.nonzero(rest)
        ss = s0[ii, jj][:, None] + (s1[ii, jj] - s0[ii, jj])[:, None] * t[None, :]
        dd = d0[ii, jj][:, None] + (d1[ii, jj] - d0[ii, jj])[:, None] * t[None, :]
        g = (tab.partial(dd / R, ss / R) - tab.partial(dd / R, (ss - ell) / R)) / R
        beyond = np.where(ss < 0, -ss, np.maximum(ss - ell, 0.0))
        g = np.where(np.hypot(beyond, dd) < reach, g, 0.0)
        vals[ii, jj] = theta * comp * (g @ w)
    return i0, j0, vals


def tube_faces(kernel: RadialKernel, A, B, theta: float, R: float, spec: GridSpec):
    """Face blocks ``((i0, j0, ux_block), (i0, j0, uy_block))`` of a tube from ``A`` to ``B``."""
    A = (float(A[0]), float(A[1]))
    v = (B[0] - A[0], B[1] - A[1])
    ell = math.hypot(*v)
    if ell == 0 or theta == 0:
        return (0, 0, np.zeros((0, 0))), (0, 0, np.zeros((0, 0)))
    n = (v[0] / ell, v[1] / ell)
    tab = _table(kernel)
    bx = _tube_axis_faces(tab, A, n, ell, theta, R, spec, True)
    by = _tube_axis_faces(tab, A, n, ell, theta, R, spec, False)
    # y-normal blocks come out as (row = y index, column = x index)
    by = (by[1], by[0], by[2].T)
    return bx, by


def _add_blocks(ux: np.ndarray, uy: np.ndarray, bx, by) -> None:
    i0, j0, blk = bx
    if blk.size:
        ux[i0:i0 + blk.shape[0], j0:j0 + blk.shape[1]] += blk
    i0, j0, blk = by
    if blk.size:
        uy[i0:i0 + blk.shape[0], j0:j0 + blk.shape[1]] += blk


def tube_field(Q: CubeRecord, kernel: RadialKernel, spec: GridSpec) -> GridField:
    """Kernel-smoothed segment from the cube centre to its parent centre carrying ``theta_Q``."""
    if Q.parent_center is None:
        raise DomainError("the root cube has no parent")
    if not Q.theta > 0:
        raise DomainError("tube needs a cube with positive mass")
    ux = np.zeros((spec.nx + 1, spec.ny))
    uy = np.zeros((spec.nx, spec.ny + 1))
    bx, by = tube_faces(kernel, Q.center, Q.parent_center, Q.theta, Q.radius, spec)
    _add_blocks(ux, uy, bx, by)
    ux[0] = ux[-1] = 0.0
    uy[:, 0] = uy[:, -1] = 0.0
    return GridField(spec, ux, uy)


def tube_sum(tree: DyadicTree, spec: Optional[GridSpec] = None) -> GridField:
    """Sum of the tube fields over every nonempty non-root cube of the level."""
    spec = spec or tree.f.spec
    ux = np.zeros((spec.nx + 1, spec.ny))
    uy = np.zeros((spec.nx, spec.ny + 1))
    for c in tree.cubes():
        if c.gen == 0 or c.theta <= 0:
            continue
        bx, by = tube_faces(tree.kernel, c.center, c.parent_center, c.theta, c.radius, spec)
        _add_blocks(ux, uy, bx, by)
    ux[0] = ux[-1] = 0.0
    uy[:, 0] = uy[:, -1] = 0.0
    return GridField(spec, ux, uy)


def node_set_contains(tree: DyadicTree, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Membership in the union of node balls ``B(c_Q, sqrt(2) R_Q R_supp)`` over the level."""
    inside = np.zeros(np.broadcast(x, y).shape, dtype=bool)
    for c in tree.cubes():
        r = NODE_BALL_FACTOR * c.radius * tree.kernel.R_supp
        inside |= np.hypot(x - c.center[0], y - c.center[1]) < r
    return inside


# ---------------------------------------------------------------------------
# node corrections


@dataclass
class NodeCorrection:
    field: GridField
    records: List[Tuple[CubeRecord, RadialField]]
    grad_constants: List[float]


def node_source(tree: DyadicTree, P: CubeRecord, n_shells: int = N_SHELLS) -> RadialField:
    """Radial solution for the node mismatch ``rho_P - sum of child kernels`` recentred at ``c_P``.

    The mismatch is represented by exact shell averages from the kernel's cumulative mass.
    """
    j = P.gen
    kids = tree.theta[j + 1][2 * P.ix:2 * P.ix + 2, 2 * P.iy:2 * P.iy + 2].ravel()
    Rk = kernel_radius(kids, tree.eps, tree.ep)
    K = tree.kernel.cumulative_mass
    outer = P.radius * tree.kernel.R_supp
    r = np.linspace(0.0, outer, n_shells + 1)
    M = P.theta * K(r / P.radius)
    for th, R in zip(kids, Rk):
        if th > 0:
            M = M - th * K(r / R)
    M = M - M[-1] * (r / outer) ** 2  # mass roundoff between parent and children, spread uniformly
    F = np.diff(M) / (np.pi * np.diff(r * r))
    return radial_divsolve(F, outer)


def node_correction(tree: DyadicTree, spec: Optional[GridSpec] = None) -> NodeCorrection:
    """Sum over non-minimal level cubes of the radial fields solving the node mismatch.

    The returned field has divergence equal to the sum of the mismatches.
    """
    spec = spec or tree.f.spec
    ux = np.zeros((spec.nx + 1, spec.ny))
    uy = np.zeros((spec.nx, spec.ny + 1))
    records, consts = [], []
    for P in tree.cubes("frontier"):
        if P.theta <= 0:
            continue
        rec = node_source(tree, P)
        u = rasterize_radial_flux(rec, P.center, spec)
        ux += u.ux
        uy += u.uy
        records.append((P, rec))
        consts.append(rec.grad_bound() * P.radius ** 2 / P.theta)
    return NodeCorrection(GridField(spec, ux, uy), records, consts)


# ---------------------------------------------------------------------------
# local diffusion inside minimal cubes


def local_diffusion(tree: DyadicTree, lam_grid: Optional[ScalarGrid] = None) -> GridField:
    """Field vanishing on every minimal cube boundary with divergence ``f - lambda_eps f`` there."""
    spec = tree.f.spec
    if lam_grid is None:
        lam_grid, _ = lambda_eps(tree)
    diff = tree.f.values - lam_grid.values
    ux = np.zeros((spec.nx + 1, spec.ny))
    uy = np.zeros((spec.nx, spec.ny + 1))
    by_gen: Dict[int, List[Tuple[int, int]]] = {}
    for j in range(tree.max_depth + 1):
        for a, b in zip(*np.nonzero(tree.minimal[j])):
            by_gen.setdefault(j, []).append((int(a), int(b)))
    for j, cubes in sorted(by_gen.items()):
        m = tree.cells_per_side(j)
        wspec = GridSpec(m, m, m * spec.hx, m * spec.hy)
        stack = np.empty((len(cubes), m, m))
        for k, (a, b) in enumerate(cubes):
            i0, i1, j0, j1 = tree.window(j, a, b)
            blk = diff[i0:i1, j0:j1]
            stack[k] = blk - blk.mean()
        bx, byy = dirichlet_divsolve_batch(stack, wspec)
        for k, (a, b) in enumerate(cubes):
            i0, i1, j0, j1 = tree.window(j, a, b)
            ux[i0:i1 + 1, j0:j1] += bx[k]
            uy[i0:i1, j0:j1 + 1] += byy[k]
    return GridField(spec, ux, uy)


def diffusion_constant(tree: DyadicTree, u: GridField) -> float:
    """``M(u) / (eps^gamma2 ||f||_2^2)`` for a local diffusion field."""
    e = malpha_eps(u, tree.ep, tree.eps, smoothing=EXACT).total
    f2 = float(np.sum(tree.f.values ** 2) * tree.f.spec.cell_area)
    return e / (tree.eps ** tree.ep.gamma2 * f2) if f2 > 0 else 0.0


# ---------------------------------------------------------------------------
# assembly


@dataclass(frozen=True)
class LocalCertificate:
    theta: float
    L: float
    eps: float
    energy: EnergyBreakdown
    l1_norm: float
    div_residual_linf: float
    branch: str
    C_measured: float
    C_l1: float
    depth: int
    n_minimal: int
    truncated: int

    def as_row(self) -> Dict[str, object]:
        return {
            "theta": self.theta,
            "L": self.L,
            "eps": self.eps,
            "lower": self.energy.lower_order,
            "dirichlet": self.energy.dirichlet,
            "total": self.energy.total,
            "l1": self.l1_norm,
            "div_resid": self.div_residual_linf,
            "branch": self.branch,
        }


CERT_COLUMNS = ("theta", "L", "eps", "lower", "dirichlet", "total", "l1", "div_resid", "branch")


@dataclass
class LocalField:
    field: GridField
    target: ScalarGrid
    tree: Optional[DyadicTree]
    parts: Dict[str, GridField] = field(default_factory=dict)


def _certificate(lf: LocalField, f: ScalarGrid, eps: float, ep: ExponentPack, branch: str) -> LocalCertificate:
    u = lf.field
    theta = f.integral()
    L = f.spec.Lx
    e = malpha_eps(u, ep, eps, smoothing=EXACT)
    l1 = field_norms(u, 1)
    resid = float(np.abs(grid_divergence(u).values - lf.target.values).max())
    f2 = float(np.sum(f.values ** 2) * f.spec.cell_area)
    scale = theta ** ep.alpha * L + eps ** ep.gamma2 * f2
    tree = lf.tree
    return LocalCertificate(
        theta=theta,
        L=L,
        eps=eps,
        energy=e,
        l1_norm=l1,
        div_residual_linf=resid,
        branch=branch,
        C_measured=e.total / scale if scale > 0 else 0.0,
        C_l1=l1 / (L * theta) if theta > 0 else 0.0,
        depth=tree.depth if tree is not None else -1,
        n_minimal=sum(int(m.sum()) for m in tree.minimal) if tree is not None else 0,
        truncated=sum(int(t.sum()) for t in tree.truncated) if tree is not None else 0,
    )


def _zero_mean(v: np.ndarray) -> np.ndarray:
    return v - v.mean()


def _oversized(f: ScalarGrid, eps: float, ep: ExponentPack, kernel: RadialKernel) -> LocalField:
    s = f.spec
    theta = f.integral()
    R = float(kernel_radius(theta, eps, ep))
    reach = R * kernel.R_supp
    pad = max(int(math.ceil((reach - 0.5 * s.Lx) / s.hx)) + 1, 1)
    nb = s.nx + 2 * pad
    if nb > MAX_OVERSIZED_CELLS:
        raise DomainError(f"enlarged cube needs {nb} cells per side (limit {MAX_OVERSIZED_CELLS})")
    big = GridSpec(nb, nb, nb * s.hx, nb * s.hy)
    fv = np.zeros((nb, nb))
    fv[pad:pad + s.nx, pad:pad + s.ny] = f.values
    center = (pad * s.hx + 0.5 * s.Lx, pad * s.hy + 0.5 * s.Ly)
    rho = rasterize_kernel(kernel, center, R, theta, big)
    target = ScalarGrid(big, fv - rho.values)
    u = dirichlet_divsolve(ScalarGrid(big, _zero_mean(target.values)))
    return LocalField(u, target, None)


def local_field(f: ScalarGrid, eps: float, ep: ExponentPack, kernel: RadialKernel) -> LocalField:
    """Field with divergence ``f - rho_{Q0}`` built from tubes, node corrections and local diffusion."""
    tree = build_tree(f, eps, ep, kernel)
    if tree.empty:
        return _oversized(f, eps, ep, kernel)
    spec = f.spec
    root = tree.record(0, 0, 0)
    if root.theta > 0:
        rho0 = rasterize_kernel(kernel, root.center, root.radius, root.theta, spec)
    else:
        rho0 = spec.zeros_scalar()
    target = ScalarGrid(spec, f.values - rho0.values)
    lam_grid, _ = lambda_eps(tree)
    Y = tube_sum(tree)
    V1 = -node_correction(tree).field
    V2 = local_diffusion(tree, lam_grid)
    V = Y + V1 + V2
    resid = target.values - grid_divergence(V).values
    fix = dirichlet_divsolve(ScalarGrid(spec, _zero_mean(resid)))
    V = V + fix
    return LocalField(V, target, tree, {"tubes": Y, "nodes": V1, "diffusion": V2, "fix": fix})


def assemble_local(f: ScalarGrid, eps: float, ep: ExponentPack, kernel: RadialKernel) -> Tuple[GridField, LocalCertificate]:
    """Certified field with divergence ``f - rho_{Q0}`` vanishing on the cube boundary.

    In the oversized-kernel case the field lives on an enlarged grid with the same
    cell size that contains the root kernel.
    """
    lf = local_field(f, eps, ep, kernel)
    branch = "oversized-kernel" if lf.tree is None else "interior-kernel"
    cert = _certificate(lf, f, eps, ep, branch)
    logger.info(
        "assemble_local %s: E=%.4g C=%.4g l1=%.4g resid=%.2e",
        branch,
        cert.energy.total,
        cert.C_measured,
        cert.l1_norm,
        cert.div_residual_linf,
    )
    return lf.field, cert

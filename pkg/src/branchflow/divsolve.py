"""Divergence solvers on the staggered grid.

Three tools live here:

* :class:`MacSpectral` diagonalises the no-flux staggered calculus with DCT/DST
  transforms, giving exact Neumann Poisson solves, L2 projections and
  mode-by-mode constrained quadratic solves in ``O(N log N)``.
* :func:`dirichlet_divsolve` returns a field vanishing on the whole window
  boundary (tangential part included) with prescribed divergence: a potential
  flow followed by a divergence-free stream-function correction that minimises
  the zero-extension Dirichlet energy.
* :func:`radial_divsolve` integrates the radial ODE for radially symmetric data.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as sla
from scipy import fft

from .core import DomainError, GridField, GridSpec, ScalarGrid, grid_divergence

logger = logging.getLogger(__name__)


class MacSpectral:
    """Transforms and symbols for the no-flux staggered grid.

    In orthonormal coordinates the gradient maps cell mode ``(k, l)`` to
    ``(-sx[k], -sy[l])`` on the two face families and the divergence maps face
    modes back with ``(+sx[k], +sy[l])``.
    """

    def __init__(self, spec: GridSpec):
        self.spec = spec
        nx, ny = spec.nx, spec.ny
        self.sx = 2.0 * np.sin(np.pi * np.arange(nx) / (2 * nx)) / spec.hx
        self.sy = 2.0 * np.sin(np.pi * np.arange(ny) / (2 * ny)) / spec.hy
        # cos^2 symbols of face-to-cell averaging along each axis
        self.avx = np.cos(np.pi * np.arange(nx) / (2 * nx)) ** 2
        self.avy = np.cos(np.pi * np.arange(ny) / (2 * ny)) ** 2
        self.lap = self.sx[:, None] ** 2 + self.sy[None, :] ** 2
        self.has_x = np.ones((nx, ny), dtype=bool)
        self.has_x[0, :] = False
        self.has_y = np.ones((nx, ny), dtype=bool)
        self.has_y[:, 0] = False

    # -- transforms -------------------------------------------------------
    def cells_fwd(self, v: np.ndarray) -> np.ndarray:
        return fft.dctn(v, type=2, norm="ortho")

    def cells_inv(self, c: np.ndarray) -> np.ndarray:
        return fft.idctn(c, type=2, norm="ortho")

    def ux_fwd(self, ux: np.ndarray) -> np.ndarray:
        out = np.zeros((self.spec.nx, self.spec.ny))
        if self.spec.nx > 1:
            inner = fft.dct(ux[1:-1], type=2, norm="ortho", axis=1)
            out[1:] = fft.dst(inner, type=1, norm="ortho", axis=0)
        return out

    def ux_inv(self, c: np.ndarray) -> np.ndarray:
        ux = np.zeros((self.spec.nx + 1, self.spec.ny))
        if self.spec.nx > 1:
            inner = fft.idst(c[1:], type=1, norm="ortho", axis=0)
            ux[1:-1] = fft.idct(inner, type=2, norm="ortho", axis=1)
        return ux

    def uy_fwd(self, uy: np.ndarray) -> np.ndarray:
        out = np.zeros((self.spec.nx, self.spec.ny))
        if self.spec.ny > 1:
            inner = fft.dct(uy[:, 1:-1], type=2, norm="ortho", axis=0)
            out[:, 1:] = fft.dst(inner, type=1, norm="ortho", axis=1)
        return out

    def uy_inv(self, c: np.ndarray) -> np.ndarray:
        uy = np.zeros((self.spec.nx, self.spec.ny + 1))
        if self.spec.ny > 1:
            inner = fft.idst(c[:, 1:], type=1, norm="ortho", axis=1)
            uy[:, 1:-1] = fft.idct(inner, type=2, norm="ortho", axis=0)
        return uy

    def field_fwd(self, u: GridField) -> Tuple[np.ndarray, np.ndarray]:
        return self.ux_fwd(u.ux), self.uy_fwd(u.uy)

    def field_inv(self, X: np.ndarray, Y: np.ndarray) -> GridField:
        return GridField(self.spec, self.ux_inv(X), self.uy_inv(Y))

    # -- solvers ----------------------------------------------------------
    def poisson_neumann(self, f: np.ndarray) -> np.ndarray:
        """Zero-mean solution of the no-flux 5-point problem ``L phi = f``."""
        fh = self.cells_fwd(f)
        lap = self.lap.copy()
        lap[0, 0] = 1.0
        ph = -fh / lap
        ph[0, 0] = 0.0
        return self.cells_inv(ph)

    def constrained_quadratic(self, ax, ay, rx, ry, fh) -> Tuple[np.ndarray, np.ndarray]:
        """Per-mode minimiser of ``a|X|^2/2 - r.X`` subject to ``sx X + sy Y = fh``.

        ``ax``, ``ay`` are positive mode-wise curvatures (scalars or arrays), ``rx``,
        ``ry`` the transformed linear terms and ``fh`` the transformed divergence.
        """
        s = np.broadcast_to(self.sx[:, None], fh.shape)
        t = np.broadcast_to(self.sy[None, :], fh.shape)
        iax = np.where(self.has_x, 1.0 / ax, 0.0)
        iay = np.where(self.has_y, 1.0 / ay, 0.0)
        rx = np.where(self.has_x, rx, 0.0)
        ry = np.where(self.has_y, ry, 0.0)
        den = s * s * iax + t * t * iay
        den[0, 0] = 1.0
        mu = (s * rx * iax + t * ry * iay - fh) / den
        mu[0, 0] = 0.0
        X = (rx - mu * s) * iax
        Y = (ry - mu * t) * iay
        return X, Y

    def project(self, u: GridField, target: ScalarGrid) -> GridField:
        """L2-orthogonal projection onto ``{div v = target}`` among no-flux fields."""
        X, Y = self.field_fwd(u)
        Xp, Yp = self.constrained_quadratic(1.0, 1.0, X, Y, self.cells_fwd(target.values))
        return self.field_inv(Xp, Yp)


_spectral_cache: Dict[GridSpec, MacSpectral] = {}
_cache_lock = threading.Lock()


def spectral(spec: GridSpec) -> MacSpectral:
    with _cache_lock:
        ms = _spectral_cache.get(spec)
        if ms is None:
            ms = MacSpectral(spec)
            _spectral_cache[spec] = ms
        return ms


def _check_zero_mean(f: ScalarGrid, what: str) -> None:
    total = float(np.sum(f.values))
    l1 = float(np.sum(np.abs(f.values)))
    if abs(total) > 1e-10 * max(l1, 1e-300):
        raise DomainError(f"{what}: right-hand side has nonzero mean (sum={total:.3e}, l1={l1:.3e})")


def potential_flow(f: ScalarGrid) -> GridField:
    """Gradient of the no-flux Poisson potential; exact divergence, zero normal boundary flux."""
    _check_zero_mean(f, "potential_flow")
    ms = spectral(f.spec)
    fh = ms.cells_fwd(f.values)
    X, Y = ms.constrained_quadratic(1.0, 1.0, 0.0 * fh, 0.0 * fh, fh)
    return ms.field_inv(X, Y)


# ---------------------------------------------------------------------------
# vanishing-boundary solver


def _diff_1d(m: int, h: float) -> sp.csr_matrix:
    """Forward differences of ``m`` interior values padded by zeros at both ends (``m + 1`` rows)."""
    return (sp.eye(m + 1, m, k=0) - sp.eye(m + 1, m, k=-1)).tocsr() / h


def _neumann_diff(n: int, h: float) -> sp.csr_matrix:
    return (sp.eye(n - 1, n, k=1) - sp.eye(n - 1, n, k=0)).tocsr() / h


def _wall_rows(n: int, h: float) -> sp.csr_matrix:
    """Half-weighted ghost differences ``2u/h`` at the two walls."""
    rows = sp.lil_matrix((2, n))
    rows[0, 0] = 2.0 / h
    rows[1, n - 1] = 2.0 / h
    return rows.tocsr() * np.sqrt(0.5)


class _StreamCorrector:
    """Factorised normal equations for the stream-function correction on one window shape."""

    def __init__(self, spec: GridSpec):
        nx, ny, hx, hy = spec.nx, spec.ny, spec.hx, spec.hy
        self.spec = spec
        Ix_in = sp.eye(nx - 1)
        Iy_c = sp.eye(ny)
        Ix_c = sp.eye(nx)
        Iy_in = sp.eye(ny - 1)
        # Dirichlet-energy difference operator on interior unknowns [ux_in, uy_in]
        dxx = _diff_1d(nx - 1, hx)
        ux_blocks = [sp.kron(dxx, Iy_c)]
        if ny > 1:
            ux_blocks.append(sp.kron(Ix_in, _neumann_diff(ny, hy)))
        ux_blocks.append(sp.kron(Ix_in, _wall_rows(ny, hy)))
        Dux = sp.vstack(ux_blocks)
        dyy = _diff_1d(ny - 1, hy)
        uy_blocks = [sp.kron(Ix_c, dyy)]
        if nx > 1:
            uy_blocks.append(sp.kron(_neumann_diff(nx, hx), Iy_in))
        uy_blocks.append(sp.kron(_wall_rows(nx, hx), Iy_in))
        Duy = sp.vstack(uy_blocks)
        self.D = sp.block_diag([Dux, Duy]).tocsr()
        # curl from interior nodes (nx-1)x(ny-1) to interior faces
        # ux[i, j] = (psi[i, j+1] - psi[i, j]) / hy for i = 1..nx-1, j = 0..ny-1
        Cy = _diff_1d(ny - 1, hy)  # (ny) x (ny-1)
        Cux = sp.kron(Ix_in, Cy)
        Cx = _diff_1d(nx - 1, hx)  # (nx) x (nx-1)
        Cuy = -sp.kron(Cx, Iy_in)
        self.C = sp.vstack([Cux, Cuy]).tocsr()
        DC = (self.D @ self.C).tocsc()
        K = (DC.T @ DC).tocsc()
        self.DC = DC
        self.lu = sla.splu(K, permc_spec="MMD_AT_PLUS_A")
        self.n_ux = (nx - 1) * ny

    def pack(self, u: GridField) -> np.ndarray:
        return np.concatenate([u.ux[1:-1].ravel(), u.uy[:, 1:-1].ravel()])

    def unpack(self, vec: np.ndarray) -> GridField:
        s = self.spec
        ux = np.zeros((s.nx + 1, s.ny))
        uy = np.zeros((s.nx, s.ny + 1))
        ux[1:-1] = vec[: self.n_ux].reshape(s.nx - 1, s.ny)
        uy[:, 1:-1] = vec[self.n_ux:].reshape(s.nx, s.ny - 1)
        return GridField(s, ux, uy)

    def correct(self, u0: GridField) -> GridField:
        v0 = self.pack(u0)
        rhs = -(self.DC.T @ (self.D @ v0))
        psi = self.lu.solve(rhs)
        return self.unpack(v0 + self.C @ psi)

    def energy(self, u: GridField) -> float:
        r = self.D @ self.pack(u)
        return float(r @ r) * self.spec.cell_area


_corrector_cache: Dict[GridSpec, _StreamCorrector] = {}


def _corrector(spec: GridSpec) -> _StreamCorrector:
    with _cache_lock:
        c = _corrector_cache.get(spec)
        if c is None:
            c = _StreamCorrector(spec)
            _corrector_cache[spec] = c
        return c


@dataclass(frozen=True)
class SolverLogRow:
    n: int
    h: float
    ratio_h1: float
    ratio_l1: float


def h10_seminorm(u: GridField) -> float:
    """Dirichlet seminorm of the zero extension of ``u`` outside its window."""
    if u.spec.nx < 2 or u.spec.ny < 2:
        raise DomainError("window must have at least 2x2 cells")
    return float(np.sqrt(_corrector(u.spec).energy(u)))


def dirichlet_divsolve(f: ScalarGrid, log: Optional[list] = None) -> GridField:
    """Field vanishing on the window boundary with ``grid_divergence(u) == f``.

    Pass one is the no-flux potential flow; pass two adds the discrete curl of a
    stream function (zero on the boundary nodes, so divergence and normal flux are
    untouched) chosen to minimise the Dirichlet energy of the zero extension.
    """
    _check_zero_mean(f, "dirichlet_divsolve")
    s = f.spec
    if s.nx < 2 or s.ny < 2:
        raise DomainError("window must have at least 2x2 cells")
    if not np.any(f.values):
        return s.zeros_field()
    u0 = potential_flow(f)
    corr = _corrector(s)
    u = corr.correct(u0)
    if log is not None:
        fl2 = f.norm(2)
        fl1 = f.norm(1)
        from .core import field_norms

        row = SolverLogRow(
            n=s.nx,
            h=s.hx,
            ratio_h1=float(np.sqrt(corr.energy(u)) / fl2) if fl2 > 0 else 0.0,
            ratio_l1=float(field_norms(u, 1) / (max(s.Lx, s.Ly) * fl1)) if fl1 > 0 else 0.0,
        )
        log.append(row)
        logger.debug("dirichlet_divsolve n=%d ratio_h1=%.4g ratio_l1=%.4g", row.n, row.ratio_h1, row.ratio_l1)
    return u


# ---------------------------------------------------------------------------
# radial solver


@dataclass(frozen=True)
class RadialField:
    """Radial field ``V(x) = v(|x|) x`` from piecewise-constant radial data.

    ``F`` holds the data on the radial cells ``[k dr, (k+1) dr)``; ``moment`` holds
    ``int_0^{r_k} F(s) s^(d-1) ds`` at the nodes ``r_k = k dr``.
    """

    dr: float
    F: np.ndarray
    moment: np.ndarray
    d: int = 2

    @property
    def radius(self) -> float:
        return self.dr * len(self.F)

    @property
    def nodes(self) -> np.ndarray:
        return self.dr * np.arange(len(self.F) + 1)

    def v(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        d = self.d
        n = len(self.F)
        k = np.clip(np.floor(r / self.dr).astype(int), 0, n)
        inside = k < n
        kk = np.minimum(k, n - 1)
        rk = kk * self.dr
        Fk = np.where(inside, self.F[kk], 0.0)
        m = np.where(inside, self.moment[kk] + Fk * (r ** d - rk ** d) / d, self.moment[-1])
        rs = np.where(r > 0, r, 1.0) ** d
        out = np.where(r > 0, m / rs, self.F[0] / d)
        return np.where(r >= self.radius, self.moment[-1] / rs, out)

    def node_values(self) -> np.ndarray:
        r = self.nodes
        out = np.empty_like(r)
        out[0] = self.F[0] / self.d
        out[1:] = self.moment[1:] / r[1:] ** self.d
        return out

    def grad_bound(self) -> float:
        """Largest Frobenius norm of ``grad V``: eigenvalues ``v`` and ``F - (d-1) v``."""
        vn = self.node_values()
        Fl = np.concatenate([self.F, [0.0]])
        Fr = np.concatenate([[self.F[0]], self.F])
        g = np.maximum(np.abs(Fl - (self.d - 1) * vn), np.abs(Fr - (self.d - 1) * vn))
        return float(np.max(np.sqrt(g ** 2 + (self.d - 1) * vn ** 2)))


def radial_divsolve(F: np.ndarray, R: float, d: int = 2, log: Optional[list] = None) -> RadialField:
    """Solve ``div(v(|x|) x) = F(|x|)`` on the ball of radius ``R`` with ``v(R) = 0``.

    ``F`` gives values on ``len(F)`` equal radial cells covering ``[0, R]``.
    """
    F = np.asarray(F, dtype=float)
    n = len(F)
    dr = R / n
    r = dr * np.arange(n + 1)
    shell = (r[1:] ** d - r[:-1] ** d) / d
    moment = np.concatenate([[0.0], np.cumsum(F * shell)])
    scale = float(np.sum(np.abs(F) * shell))
    if abs(moment[-1]) > 1e-8 * max(scale, 1e-300):
        raise DomainError(f"radial data has nonzero mass (moment={moment[-1]:.3e}, scale={scale:.3e})")
    moment[-1] = 0.0
    rec = RadialField(dr=dr, F=F, moment=moment, d=d)
    if log is not None:
        fmax = float(np.abs(F).max()) if n else 0.0
        c = rec.grad_bound() / fmax if fmax > 0 else 0.0
        log.append(c)
        logger.debug("radial_divsolve R=%.4g grad/F ratio %.4g", R, c)
    return rec


def rasterize_radial(rec: RadialField, center, spec: GridSpec) -> GridField:
    """Sample ``V(x) = v(|x - c|)(x - c)`` at face centres inside the bounding box of the ball."""
    cx, cy = center
    R = rec.radius
    ux = np.zeros((spec.nx + 1, spec.ny))
    uy = np.zeros((spec.nx, spec.ny + 1))
    i0 = max(int(np.floor((cx - R) / spec.hx)), 0)
    i1 = min(int(np.ceil((cx + R) / spec.hx)) + 1, spec.nx + 1)
    j0 = max(int(np.floor((cy - R) / spec.hy)), 0)
    j1 = min(int(np.ceil((cy + R) / spec.hy)) + 1, spec.ny + 1)
    if i0 >= i1 or j0 >= j1:
        return GridField(spec, ux, uy)
    # vertical faces
    xs = np.arange(i0, i1) * spec.hx - cx
    ys = (np.arange(j0, min(j1, spec.ny)) + 0.5) * spec.hy - cy
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    r = np.hypot(X, Y)
    ux[i0:i1, j0:j0 + len(ys)] = np.where(r < R, rec.v(r) * X, 0.0)
    xs = (np.arange(i0, min(i1, spec.nx)) + 0.5) * spec.hx - cx
    ys = np.arange(j0, j1) * spec.hy - cy
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    r = np.hypot(X, Y)
    uy[i0:i0 + len(xs), j0:j1] = np.where(r < R, rec.v(r) * Y, 0.0)
    ux[0] = ux[-1] = 0.0
    uy[:, 0] = uy[:, -1] = 0.0
    return GridField(spec, ux, uy)


def divergence_residual(u: GridField, target: ScalarGrid) -> float:
    return float(np.abs(grid_divergence(u).values - target.values).max())


_operator_cache: Dict[GridSpec, Tuple[np.ndarray, np.ndarray]] = {}


def _dense_operator(spec: GridSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Columns of :func:`dirichlet_divsolve` on the zero-mean basis ``e_k - e_last``."""
    with _cache_lock:
        op = _operator_cache.get(spec)
    if op is not None:
        return op
    m = spec.nx * spec.ny
    cols_x = np.zeros((m - 1, spec.nx + 1, spec.ny))
    cols_y = np.zeros((m - 1, spec.nx, spec.ny + 1))
    for k in range(m - 1):
        v = np.zeros(m)
        v[k] = 1.0
        v[-1] = -1.0
        u = dirichlet_divsolve(ScalarGrid(spec, v.reshape(spec.nx, spec.ny)))
        cols_x[k] = u.ux
        cols_y[k] = u.uy
    op = (cols_x.reshape(m - 1, -1), cols_y.reshape(m - 1, -1))
    with _cache_lock:
        _operator_cache[spec] = op
    return op


def dirichlet_divsolve_batch(values: np.ndarray, spec: GridSpec) -> Tuple[np.ndarray, np.ndarray]:
    """:func:`dirichlet_divsolve` applied to a stack of zero-mean windows of one shape.

    Small windows use a cached dense solution operator; larger ones are solved one by one.
    Returns stacked ``ux`` and ``uy`` arrays.
    """
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    flat = values.reshape(n, -1)
    sums = flat.sum(axis=1)
    l1 = np.abs(flat).sum(axis=1)
    if np.any(np.abs(sums) > 1e-10 * np.maximum(l1, 1e-300)):
        raise DomainError("dirichlet_divsolve_batch: a window has nonzero mean")
    if spec.nx * spec.ny <= 256:
        opx, opy = _dense_operator(spec)
        coeff = flat[:, :-1]
        ux = (coeff @ opx).reshape(n, spec.nx + 1, spec.ny)
        uy = (coeff @ opy).reshape(n, spec.nx, spec.ny + 1)
        return ux, uy
    ux = np.zeros((n, spec.nx + 1, spec.ny))
    uy = np.zeros((n, spec.nx, spec.ny + 1))
    for k in range(n):
        u = dirichlet_divsolve(ScalarGrid(spec, values[k]))
        ux[k] = u.ux
        uy[k] = u.uy
    return ux, uy


# ---------------------------------------------------------------------------
# exact rasterization of radial fields


def _radial_line_antiderivative(rec: RadialField, d: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``G[c, k] = int_0^{y[c, k]} d_c v(r) dt`` with ``r = sqrt(d_c^2 + t^2)`` (odd in ``y``).

    On shell ``k`` the field is ``v = a_k / r^2 + F_k / 2`` with ``a_k = m_k - F_k r_k^2 / 2``,
    which integrates to arctan and linear pieces.
    """
    if rec.d != 2:
        raise DomainError("exact radial fluxes are implemented for d=2")
    n = len(rec.F)
    r = rec.nodes
    a = rec.moment[:-1] - 0.5 * rec.F * r[:-1] ** 2
    half_F = 0.5 * rec.F
    ad = np.abs(d)[:, None]
    sg = np.sign(d)[:, None]
    dd = d[:, None]
    # breakpoints along the line where it crosses shell radii
    yk = np.sqrt(np.maximum(r[None, :] ** 2 - ad ** 2, 0.0))

    def piece(k, lo, hi):
        return a[k] * sg * (np.arctan2(hi, ad) - np.arctan2(lo, ad)) + half_F[k] * dd * (hi - lo)

    ks = np.arange(n)[None, :]
    full = piece(ks, yk[:, :-1], yk[:, 1:])
    cum = np.concatenate([np.zeros((len(d), 1)), np.cumsum(full, axis=1)], axis=1)
    yy = np.abs(y)
    rr = np.sqrt(ad ** 2 + yy ** 2)
    k = np.minimum((rr / rec.dr).astype(int), n)
    kk = np.minimum(k, n - 1)
    lo = np.take_along_axis(yk, kk, axis=1)
    part = a[kk] * sg * (np.arctan2(yy, ad) - np.arctan2(lo, ad)) + half_F[kk] * dd * (yy - lo)
    G = np.where(k >= n, cum[:, -1:], np.take_along_axis(cum, kk, axis=1) + part)
    return np.sign(y) * G


def rasterize_radial_flux(rec: RadialField, center, spec: GridSpec) -> GridField:
    """Exact face averages of ``V(x) = v(|x - c|)(x - c)`` on the faces meeting the ball.

    Because the values are exact face fluxes, the discrete divergence equals the
    cell averages of the radial data (see :func:`radial_cell_averages`).
    """
    cx, cy = center
    R = rec.radius
    ux = np.zeros((spec.nx + 1, spec.ny))
    uy = np.zeros((spec.nx, spec.ny + 1))
    i0 = max(int(np.floor((cx - R) / spec.hx)), 0)
    i1 = min(int(np.ceil((cx + R) / spec.hx)), spec.nx)
    j0 = max(int(np.floor((cy - R) / spec.hy)), 0)
    j1 = min(int(np.ceil((cy + R) / spec.hy)), spec.ny)
    if i0 >= i1 or j0 >= j1:
        return GridField(spec, ux, uy)
    # vertical faces x = i hx, rows j0..j1-1
    d = np.arange(i0, i1 + 1) * spec.hx - cx
    y = np.arange(j0, j1 + 1) * spec.hy - cy
    G = _radial_line_antiderivative(rec, d, np.broadcast_to(y, (len(d), len(y))))
    ux[i0:i1 + 1, j0:j1] = np.diff(G, axis=1) / spec.hy
    d = np.arange(j0, j1 + 1) * spec.hy - cy
    x = np.arange(i0, i1 + 1) * spec.hx - cx
    G = _radial_line_antiderivative(rec, d, np.broadcast_to(x, (len(d), len(x))))
    uy[i0:i1, j0:j1 + 1] = (np.diff(G, axis=1) / spec.hx).T
    return GridField(spec, ux, uy)


def _quadrant_disc_area(x: np.ndarray, y: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Area of ``[0, x] x [0, y]`` inside the disc of radius ``r`` (all arguments >= 0)."""
    xs = np.sqrt(np.maximum(r * r - y * y, 0.0))
    xa = np.minimum(x, xs)
    xb = np.minimum(x, r)
    safe = np.where(r > 0, r, 1.0)

    def prim(t):
        return 0.5 * (t * np.sqrt(np.maximum(r * r - t * t, 0.0)) + r * r * np.arcsin(np.clip(t / safe, -1.0, 1.0)))

    return np.where(r > 0, y * xa + prim(xb) - prim(xa), 0.0)


def _signed_quadrant(x, y, r):
    return np.sign(x) * np.sign(y) * _quadrant_disc_area(np.abs(x), np.abs(y), r)


def radial_cell_averages(rec: RadialField, center, spec: GridSpec) -> ScalarGrid:
    """Exact cell averages of the piecewise-constant radial data ``F`` placed at ``center``."""
    cx, cy = center
    R = rec.radius
    out = np.zeros((spec.nx, spec.ny))
    i0 = max(int(np.floor((cx - R) / spec.hx)), 0)
    i1 = min(int(np.ceil((cx + R) / spec.hx)), spec.nx)
    j0 = max(int(np.floor((cy - R) / spec.hy)), 0)
    j1 = min(int(np.ceil((cy + R) / spec.hy)), spec.ny)
    if i0 >= i1 or j0 >= j1:
        return ScalarGrid(spec, out)
    x = (np.arange(i0, i1 + 1) * spec.hx - cx)[:, None, None]
    y = (np.arange(j0, j1 + 1) * spec.hy - cy)[None, :, None]
    r = rec.nodes[None, None, :]
    corner = _signed_quadrant(x, y, r)
    rect = corner[1:, 1:] - corner[:-1, 1:] - corner[1:, :-1] + corner[:-1, :-1]
    annulus = np.diff(rect, axis=2)
    out[i0:i1, j0:j1] = annulus @ rec.F / spec.cell_area
    return ScalarGrid(spec, out)

"""Optimal one-dimensional profile, its rescalings and the radial kernel with that marginal.

The profile minimises ``int w**beta + int w'**2`` among nonnegative ``w`` with unit
mass.  Stationarity gives ``-2 w'' + beta w**(beta - 1) = lam`` on the support.
Multiplying by ``w'`` and using ``w = w' = 0`` at the free boundary yields
``w'**2 = w**beta - lam w`` and ``lam = w(0)**(beta - 1)``.  Writing ``w = w0 * y``,
the distance from the support edge to the level ``y`` is

    s(y) = w0**(1 - beta/2) * T(y),   T(y) = int_0^y dt / sqrt(t**beta - t),

and with ``z = t**(1 - beta)`` the integral ``T`` is an incomplete beta function.
That closed form makes the inward integration from the free boundary exact.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import linalg, optimize, special

from .core import DomainError, ExponentPack, SolverError

logger = logging.getLogger(__name__)

W_FLOOR_REL = 1e-8


def _beta_shapes(beta: float) -> Tuple[float, float, float]:
    """Shape parameters of the incomplete beta integrals for ``T``, mass and ``int w**beta``."""
    one = 1.0 - beta
    m_T = (2.0 - beta) / (2.0 * one)
    m_mass = (4.0 - beta) / (2.0 * one)
    m_pow = (2.0 + beta) / (2.0 * one)
    return m_T, m_mass, m_pow


def _complete(m: float, beta: float) -> float:
    return float(special.beta(m, 0.5) / (1.0 - beta))


def _levels_from_distance(s_over_a: np.ndarray, beta: float) -> np.ndarray:
    """Invert ``T``: normalised level ``y`` at normalised distance ``s/a`` from the edge."""
    m_T, _, _ = _beta_shapes(beta)
    total = _complete(m_T, beta)
    frac = np.clip(s_over_a / total, 0.0, 1.0)
    z = special.betaincinv(m_T, 0.5, frac)
    return z ** (1.0 / (1.0 - beta))


@dataclass(frozen=True)
class Profile1D:
    beta: float
    x: np.ndarray
    w: np.ndarray
    dw: np.ndarray
    lam: float
    R_supp: float
    c0: float
    w0: float
    bisection_iters: int = 0

    @property
    def h(self) -> float:
        return float(self.x[1] - self.x[0])

    def evaluate(self, x) -> np.ndarray:
        """Profile at arbitrary points via the closed-form inverse (machine precision)."""
        x = np.abs(np.asarray(x, dtype=float))
        a = self.w0 ** (1.0 - 0.5 * self.beta)
        s = np.maximum(self.R_supp - x, 0.0)
        return self.w0 * _levels_from_distance(s / a, self.beta)

    def slope(self, x) -> np.ndarray:
        """``w'`` from the first integral ``w'**2 = w**beta - lam w``."""
        x = np.asarray(x, dtype=float)
        w = self.evaluate(x)
        mag = np.sqrt(np.maximum(w ** self.beta - self.lam * w, 0.0))
        return -np.sign(x) * mag

    def mass(self) -> float:
        return float(np.sum(0.5 * (self.w[1:] + self.w[:-1]) * np.diff(self.x)))

    def floor(self) -> float:
        return W_FLOOR_REL * float(self.w.max())


def _mass_for(lam: float, beta: float) -> float:
    w0 = lam ** (1.0 / (beta - 1.0))
    a = w0 ** (1.0 - 0.5 * beta)
    _, m_mass, _ = _beta_shapes(beta)
    return 2.0 * w0 * a * _complete(m_mass, beta)


_profile_cache: Dict[Tuple[float, int], Profile1D] = {}
_lock = threading.Lock()


def solve_profile(beta: float, n_grid: int = 4096, max_iter: int = 200) -> Profile1D:
    """Shooting from the free boundary with bisection on the multiplier until the mass is one."""
    if not 0.0 < beta < 1.0:
        raise DomainError(f"beta must lie in (0, 1), got {beta}")
    if n_grid < 256:
        raise DomainError(f"n_grid must be >= 256, got {n_grid}")
    key = (float(beta), int(n_grid))
    with _lock:
        if key in _profile_cache:
            return _profile_cache[key]
    lo, hi = 1e-3, 1.0
    while _mass_for(hi, beta) > 1.0:
        hi *= 2.0
    while _mass_for(lo, beta) < 1.0:
        lo /= 2.0
    it = 0
    for it in range(1, max_iter + 1):
        mid = 0.5 * (lo + hi)
        if _mass_for(mid, beta) > 1.0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 4e-16 * hi:
            break
    else:
        raise SolverError(f"profile bisection did not converge: bracket [{lo}, {hi}], mass residual {_mass_for(lo, beta) - 1:.3e}")
    lam = 0.5 * (lo + hi)
    w0 = lam ** (1.0 / (beta - 1.0))
    a = w0 ** (1.0 - 0.5 * beta)
    m_T, _, m_pow = _beta_shapes(beta)
    R = a * _complete(m_T, beta)
    x = np.linspace(-R, R, n_grid + 1)
    y = _levels_from_distance((R - np.abs(x)) / a, beta)
    w = w0 * y
    w[0] = w[-1] = 0.0
    dw = -np.sign(x) * w0 ** (0.5 * beta) * np.sqrt(np.maximum(y ** beta - y, 0.0))
    # exact mirror symmetry of the samples
    w = 0.5 * (w + w[::-1])
    dw = 0.5 * (dw - dw[::-1])
    # int w**beta and the virial relation int w'**2 = (1 - beta)/3 int w**beta
    lower = 2.0 * w0 ** beta * a * _complete(m_pow, beta)
    c0 = lower * (4.0 - beta) / 3.0
    prof = Profile1D(beta=float(beta), x=x, w=w, dw=dw, lam=lam, R_supp=R, c0=c0, w0=w0, bisection_iters=it)
    logger.info("profile beta=%.6g: c0=%.10g lam=%.10g R=%.6g (%d bisection steps)", beta, c0, lam, R, it)
    with _lock:
        _profile_cache[key] = prof
    return prof


def profile_energy_quadrature(x: np.ndarray, w: np.ndarray, beta: float) -> Tuple[float, float]:
    """Trapezoid ``int w**beta`` and difference-quotient ``int w'**2`` of sampled data."""
    h = np.diff(x)
    wb = np.maximum(w, 0.0) ** beta
    lower = float(np.sum(0.5 * (wb[1:] + wb[:-1]) * h))
    grad = float(np.sum(np.diff(w) ** 2 / h))
    return lower, grad


def euler_lagrange_residual(p: Profile1D, n_check: int = 400) -> Tuple[float, float]:
    """Max residuals of the stationarity equation and of the first integral on ``{w > floor}``.

    Derivatives come from five-point differences of the closed-form evaluator with a
    step proportional to the distance from the support edge.
    """
    floor = p.floor()
    xs = np.linspace(0.0, p.R_supp, n_check + 2)[1:-1]
    ws = p.evaluate(xs)
    xs = xs[ws > floor]
    ws = ws[ws > floor]
    dist = p.R_supp - xs
    step = np.minimum(1e-3 * dist, 1e-3 * p.R_supp)
    offs = np.array([-2.0, -1.0, 1.0, 2.0])
    coef = np.array([1.0, -8.0, 8.0, -1.0]) / 12.0
    pts = xs[:, None] + offs[None, :] * step[:, None]
    w_pts = p.evaluate(pts)
    dw_fd = (w_pts @ coef) / step
    slope_pts = p.slope(pts)
    d2w_fd = (slope_pts @ coef) / step
    b = p.beta
    el = np.abs(-2.0 * d2w_fd + b * ws ** (b - 1.0) - p.lam)
    first = np.abs(dw_fd ** 2 - (ws ** b - p.lam * ws + p.lam * p.w0 - p.w0 ** b))
    return float(el.max()), float(first.max())


# ---------------------------------------------------------------------------
# independent direct minimisation (oracle)


def _discrete_energy(w: np.ndarray, h: float, beta: float) -> float:
    return float(h * np.sum(w ** beta) + np.sum(np.diff(w) ** 2) / h)


def _newton_refine(w: np.ndarray, h: float, beta: float, max_iter: int = 400) -> Tuple[np.ndarray, int]:
    """Projected Newton steps on the nodes where ``w > 0`` with the mass held fixed.

    The KKT system is tridiagonal plus one border row.  When the reduced Hessian is
    not positive definite the concave term is dropped, which leaves the Sobolev
    (discrete Laplacian) preconditioned gradient.  Steps are accepted only on decrease.
    """
    w = w.copy()
    energy = _discrete_energy(w, h, beta)
    it = 0
    for it in range(1, max_iter + 1):
        free = np.flatnonzero(w > 0)
        wf = w[free]
        full_lap = np.zeros_like(w)
        dw = np.diff(w)
        full_lap[:-1] -= dw
        full_lap[1:] += dw
        grad = h * beta * wf ** (beta - 1.0) + (2.0 / h) * full_lap[free]
        degree = np.full(len(w), 2.0)
        degree[0] = degree[-1] = 1.0
        diag_lap = (2.0 / h) * degree[free]
        link = np.diff(free) == 1
        upper = np.where(link, -2.0 / h, 0.0)
        curv = h * beta * (beta - 1.0) * wf ** (beta - 2.0)
        direction = None
        for diag in (diag_lap + curv, diag_lap):
            ab = np.zeros((2, len(free)))
            ab[0, 1:] = upper
            ab[1] = diag
            try:
                sol = linalg.solveh_banded(ab, np.column_stack([grad, np.ones_like(grad)]))
            except linalg.LinAlgError:
                continue
            mu = -sol[:, 0].sum() / sol[:, 1].sum()
            d = -(sol[:, 0] + mu * sol[:, 1])
            slope = float(grad @ d)
            if slope < 0:
                direction = d
                break
        if direction is None:
            break
        t = 1.0
        accepted = False
        while t > 1e-12:
            trial = w.copy()
            trial[free] = np.maximum(wf + t * direction, 0.0)
            trial /= h * trial.sum()
            e_new = _discrete_energy(trial, h, beta)
            if e_new < energy:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        gain = energy - e_new
        w, energy = trial, e_new
        if gain <= 1e-15 * energy:
            break
    return w, it


def minimize_profile_direct(
    beta: float, n: int = 4096, half_width: float = 4.0, levels: int = 5, pad_cells: int = 3
) -> Tuple[float, np.ndarray, np.ndarray]:
    """Discretised minimisation of ``h sum w**beta + sum (dw)**2 / h`` with unit mass.

    The coarsest level runs L-BFGS-B on the renormalised objective ``E(w / (h sum w))``
    over ``w >= 0`` from a wide initial bump; finer levels interpolate and refine with
    projected Newton steps.  Since the slope of ``w**beta`` is infinite at zero the
    support can only shrink during a descent, so each level starts from a support
    padded by a few coarse cells.  Returns ``(c0, x, w)``.
    """
    if not 0.0 < beta < 1.0:
        raise DomainError(f"beta must lie in (0, 1), got {beta}")
    delta = 1e-14
    sizes = [max(n >> k, 64) for k in range(levels - 1, -1, -1)]
    w_prev = None
    x_prev = None
    for nn in sizes:
        x = np.linspace(-half_width, half_width, nn + 1)
        h = x[1] - x[0]
        if w_prev is None:
            w_init = np.maximum(1.0 - (x / (0.95 * half_width)) ** 2, 0.0)
            w_init = w_init / (h * w_init.sum())

            def obj(v, h=h):
                m = h * v.sum()
                q = v / m
                qb = (q + delta) ** beta - delta ** beta
                dq = np.diff(q)
                e = h * qb.sum() + np.sum(dq * dq) / h
                g_q = h * beta * (q + delta) ** (beta - 1.0)
                g_q[:-1] -= 2.0 * dq / h
                g_q[1:] += 2.0 * dq / h
                # chain rule through q = v / m
                g_v = (g_q - h * np.dot(g_q, q)) / m
                return e, g_v

            res = optimize.minimize(
                obj, w_init, jac=True, method="L-BFGS-B", bounds=[(0.0, None)] * len(x),
                options={"maxiter": 20000, "maxcor": 30, "ftol": 1e-13, "gtol": 1e-10},
            )
            w_start = res.x
            w_start[w_start < 1e-12 * w_start.max()] = 0.0
        else:
            w_start = np.interp(x, x_prev, w_prev)
            hc = x_prev[1] - x_prev[0]
            edge = np.abs(x_prev[w_prev > 0]).max() + pad_cells * hc
            w_start = np.where((w_start <= 0) & (np.abs(x) < edge), 1e-3 * w_prev.max(), w_start)
        w_start = w_start / (h * w_start.sum())
        w_prev, iters = _newton_refine(w_start, h, beta)
        x_prev = x
        logger.debug("direct profile n=%d energy=%.12g newton iters=%d", nn, _discrete_energy(w_prev, h, beta), iters)
    h = x_prev[1] - x_prev[0]
    return _discrete_energy(w_prev, h, beta), x_prev, w_prev


# ---------------------------------------------------------------------------
# rescaling


@dataclass(frozen=True)
class RescaledProfile:
    x: np.ndarray
    w: np.ndarray
    dw: np.ndarray
    theta: float
    radius: float

    @property
    def support(self) -> float:
        return float(self.x[-1])

    def mass(self) -> float:
        return float(np.sum(0.5 * (self.w[1:] + self.w[:-1]) * np.diff(self.x)))


def rescale_profile(p: Profile1D, theta: float, eps: float, ep: ExponentPack) -> RescaledProfile:
    """Slice profile ``theta / R * w(x / R)`` for a ridge of mass ``theta`` at scale ``eps``."""
    if not (theta > 0 and eps > 0):
        raise DomainError("theta and eps must be positive")
    if ep.d != 2:
        raise DomainError("profile rescaling is implemented for d = 2")
    R = float(ep.tube_radius(theta, eps))
    return RescaledProfile(x=p.x * R, w=theta * p.w / R, dw=theta * p.dw / R ** 2, theta=float(theta), radius=R)


def ridge_energy(rp: RescaledProfile, ep: ExponentPack, eps: float) -> float:
    """Energy per unit length of a straight ridge with cross-section ``rp``."""
    h = np.diff(rp.x)
    vb = np.maximum(rp.w, 0.0) ** ep.beta
    lower = float(np.sum(0.5 * (vb[1:] + vb[:-1]) * h))
    d2 = rp.dw ** 2
    grad = float(np.sum(0.5 * (d2[1:] + d2[:-1]) * h))
    return eps ** (-ep.gamma1) * lower + eps ** ep.gamma2 * grad


# ---------------------------------------------------------------------------
# radial kernel


@dataclass(frozen=True)
class RadialKernel:
    """Radial density sampled on a uniform grid over ``[0, R_supp]`` (zero beyond).

    Samples are normalised so that the exact mass of the piecewise-linear
    interpolant is one; ``raw_mass`` keeps the value before normalisation.
    """

    r: np.ndarray
    rho: np.ndarray
    R_supp: float
    raw_mass: float = 1.0
    _cache: dict = field(default_factory=dict, compare=False, repr=False, hash=False)

    @property
    def dr(self) -> float:
        return float(self.r[1] - self.r[0])

    def __call__(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        return np.interp(r, self.r, self.rho, right=0.0)

    def panel_masses(self) -> np.ndarray:
        """Exact ``2 pi int rho s ds`` per panel for the linear interpolant."""
        r0, r1 = self.r[:-1], self.r[1:]
        a, b = self.rho[:-1], self.rho[1:]
        # rho linear: a + (b - a)(s - r0)/dr; integrate times s
        dr = r1 - r0
        integ = dr * (a * (2 * r0 + r1) + b * (r0 + 2 * r1)) / 6.0
        return 2.0 * np.pi * integ

    def mass(self) -> float:
        return float(np.sum(self.panel_masses()))

    def cumulative_mass(self, r) -> np.ndarray:
        """Mass inside radius ``r`` (exact for the piecewise-linear interpolant)."""
        r = np.clip(np.asarray(r, dtype=float), 0.0, self.R_supp)
        cum = self._cache.get("cum")
        if cum is None:
            cum = np.concatenate([[0.0], np.cumsum(self.panel_masses())])
            self._cache["cum"] = cum
        dr = self.dr
        k = np.minimum((r / dr).astype(int), len(self.r) - 2)
        r0 = self.r[k]
        a = self.rho[k]
        slope = (self.rho[k + 1] - a) / dr
        t = r - r0
        # int_{r0}^{r} (a + slope (s - r0)) s ds
        part = a * (r * r - r0 * r0) / 2.0 + slope * (t ** 3 / 3.0 + r0 * t * t / 2.0)
        return cum[k] + 2.0 * np.pi * part

    def line_table(self, n_delta: int = 257, n_sigma: int = 513):
        """Tabulated partial line integrals ``P(delta, sigma) = int_{-inf}^{sigma} rho(sqrt(s^2 + delta^2)) ds``.

        The last column is the projection of the kernel onto one axis; it is
        renormalised to unit mass so that tubes carry exact flux.
        """
        key = ("line", n_delta, n_sigma)
        tab = self._cache.get(key)
        if tab is not None:
            return tab
        R = self.R_supp
        delta = np.linspace(0.0, R, n_delta)
        sigma = np.linspace(-R, R, n_sigma)
        # fine quadrature in s on each delta row with a substitution that clusters at the chord ends
        nq = 4 * n_sigma
        P = np.zeros((n_delta, n_sigma))
        for i, dl in enumerate(delta):
            half = np.sqrt(max(R * R - dl * dl, 0.0))
            if half <= 0:
                continue
            tq = np.linspace(-np.pi / 2, np.pi / 2, nq + 1)
            sq = half * np.sin(tq)
            vals = self(np.hypot(sq, dl)) * half * np.cos(tq)
            cum = np.concatenate([[0.0], np.cumsum(0.5 * (vals[1:] + vals[:-1]) * np.diff(tq))])
            P[i] = np.interp(sigma, sq, cum, left=0.0, right=cum[-1])
        marg = P[:, -1].copy()
        # unit mass of the projection: 2 * int_0^R marg (trapezoid of the linear interpolant)
        total = 2.0 * float(np.sum(0.5 * (marg[1:] + marg[:-1]) * np.diff(delta)))
        P /= total
        marg = P[:, -1].copy()
        cum_marg = np.concatenate([[0.0], np.cumsum(0.5 * (marg[1:] + marg[:-1]) * np.diff(delta))])
        tab = (delta, sigma, P, marg, cum_marg)
        self._cache[key] = tab
        return tab


def _abel_panels(s: np.ndarray, g: np.ndarray, r: np.ndarray) -> np.ndarray:
    """``(1/pi) int_r^R g(s) / sqrt(s^2 - r^2) ds`` for piecewise-linear ``g``, panel by panel exactly."""
    s0, s1 = s[:-1], s[1:]
    g0, g1 = g[:-1], g[1:]
    b = (g1 - g0) / (s1 - s0)
    a = g0 - b * s0
    out = np.zeros_like(r)
    for idx, rr in enumerate(r):
        lo = np.maximum(s0, rr)
        mask = s1 > rr
        if not np.any(mask):
            continue
        lo_m, hi_m = lo[mask], s1[mask]
        a_m, b_m = a[mask], b[mask]
        if rr == 0.0:
            with np.errstate(divide="ignore", invalid="ignore"):
                logterm = np.where(a_m != 0.0, a_m * np.log(hi_m / np.where(lo_m > 0, lo_m, 1.0)), 0.0)
            first = lo_m == 0.0
            logterm = np.where(first & (a_m != 0.0), np.inf, logterm)
            out[idx] = np.sum(logterm + b_m * (hi_m - lo_m)) / np.pi
            continue
        sq_hi = np.sqrt(np.maximum(hi_m * hi_m - rr * rr, 0.0))
        sq_lo = np.sqrt(np.maximum(lo_m * lo_m - rr * rr, 0.0))
        logterm = a_m * (np.log(hi_m + sq_hi) - np.log(lo_m + sq_lo))
        out[idx] = np.sum(logterm + b_m * (sq_hi - sq_lo)) / np.pi
    return out


def kernel_from_profile(p: Profile1D, n_radial: int = 2048, n_abel: int = 4096) -> RadialKernel:
    """Radial density whose projection onto a line is the profile (Abel inversion of ``-w'``).

    ``-w'`` is taken from the closed-form evaluator on panels graded towards the support
    edge, where it behaves like a fractional power of the distance to the edge.
    """
    t = np.linspace(0.0, 1.0, n_abel + 1)
    s = p.R_supp * (1.0 - (1.0 - t) ** 3)
    g = -p.slope(s)
    g[0] = 0.0
    g[-1] = 0.0
    r = np.linspace(0.0, p.R_supp, n_radial + 1)
    rho = _abel_panels(s, g, r)
    rho[-1] = 0.0
    if not np.all(np.isfinite(rho)):
        raise SolverError("Abel inversion produced non-finite kernel values")
    k = RadialKernel(r=r, rho=rho, R_supp=p.R_supp)
    raw = k.mass()
    logger.info("kernel beta=%.4g: raw mass %.10f, rho(0)=%.6g", p.beta, raw, rho[0])
    return RadialKernel(r=r, rho=rho / raw, R_supp=p.R_supp, raw_mass=raw)


def kernel_rescale(k: RadialKernel, theta: float, eps: float, ep: ExponentPack) -> RadialKernel:
    """``R**-2 rho(x / R)`` with ``R`` the optimal tube width for mass ``theta``."""
    if not (theta > 0 and eps > 0):
        raise DomainError("theta and eps must be positive")
    R = float(ep.tube_radius(theta, eps))
    return scale_kernel(k, R)


def scale_kernel(k: RadialKernel, R: float) -> RadialKernel:
    return RadialKernel(r=k.r * R, rho=k.rho / R ** 2, R_supp=k.R_supp * R, raw_mass=k.raw_mass)


_kernel_cache: Dict[Tuple[float, int, int], RadialKernel] = {}


def standard_kernel(beta: float, n_grid: int = 4096, n_radial: int = 2048) -> RadialKernel:
    key = (float(beta), n_grid, n_radial)
    with _lock:
        if key in _kernel_cache:
            return _kernel_cache[key]
    k = kernel_from_profile(solve_profile(beta, n_grid), n_radial)
    with _lock:
        _kernel_cache[key] = k
    return k


def marginal_error(p: Profile1D, k: RadialKernel, n: int = 512) -> float:
    """L1 distance between the kernel's line projection and the profile, midpoint rule on an ``n x n`` grid."""
    R = p.R_supp
    h = 2.0 * R / n
    c = -R + h * (np.arange(n) + 0.5)
    X, Y = np.meshgrid(c, c, indexing="ij")
    marg = k(np.hypot(X, Y)).sum(axis=1) * h
    return float(np.sum(np.abs(marg - p.evaluate(c))) * h)

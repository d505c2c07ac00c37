"""Domain types, exponent algebra, measures and staggered-grid calculus.

Grid conventions
----------------
Scalars live at cell centres of an ``nx`` by ``ny`` grid over ``[0, Lx] x [0, Ly]``
and are stored as arrays of shape ``(nx, ny)`` indexed ``[i, j]`` with ``i`` along x.
Vector fields use the staggered (MAC) layout: ``ux`` has shape ``(nx + 1, ny)`` and
sits on vertical faces ``x = i * hx``; ``uy`` has shape ``(nx, ny + 1)`` and sits on
horizontal faces ``y = j * hy``.  Faces on the outer boundary carry the normal flux,
which every solver in this package keeps at zero.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

Window = Tuple[int, int, int, int]
"""Half-open cell-index rectangle ``(i0, i1, j0, j1)``."""

MERGE_RTOL = 1e-9


class DomainError(ValueError):
    """Input outside the mathematical domain of an operation."""


class SolverError(RuntimeError):
    """A numerical procedure failed to converge or produced non-finite output."""


class BranchError(RuntimeError):
    """Operation requested on the wrong branch of a case analysis."""


# ---------------------------------------------------------------------------
# exponents


@dataclass(frozen=True)
class ExponentPack:
    alpha: float
    d: int
    beta: float
    gamma1: float
    gamma2: float
    gamma: float

    def tube_radius(self, theta, eps):
        """Optimal tube width ``eps**gamma * theta**((1 - gamma) / (d - 1))``."""
        theta = np.asarray(theta, dtype=float)
        return eps ** self.gamma * theta ** ((1.0 - self.gamma) / (self.d - 1))


def exponents(alpha: float, d: int) -> ExponentPack:
    """Derived exponents of the phase-field energy for cost exponent ``alpha`` in dimension ``d``."""
    if int(d) != d or d < 2:
        raise DomainError(f"dimension must be an integer >= 2, got d={d}")
    d = int(d)
    lo = 1.0 - 1.0 / d
    if not (lo < alpha < 1.0):
        raise DomainError(f"alpha={alpha} violates {lo:.6g} < alpha < 1 for d={d}")
    denom = 3.0 - d + alpha * (d - 1)
    beta = (2.0 - 2.0 * d + 2.0 * alpha * d) / denom
    gamma1 = (d - 1) * (1.0 - alpha)
    gamma2 = denom
    gamma = 2.0 / (2.0 * d - beta * (d - 1))
    if abs(gamma - gamma2 / (d + 1)) > 1e-12:
        raise SolverError(f"inconsistent gamma formulas: {gamma} vs {gamma2 / (d + 1)}")
    return ExponentPack(alpha=float(alpha), d=d, beta=beta, gamma1=gamma1, gamma2=gamma2, gamma=gamma)


# ---------------------------------------------------------------------------
# measures and graphs


def _merge_points(points: np.ndarray, masses: np.ndarray, tol: float):
    """Greedy merge of points closer than ``tol``; deterministic in input order."""
    out_p: list = []
    out_m: list = []
    for p, m in zip(points, masses):
        for k, q in enumerate(out_p):
            if np.hypot(p[0] - q[0], p[1] - q[1]) <= tol:
                out_m[k] += m
                break
        else:
            out_p.append(np.array(p, dtype=float))
            out_m.append(float(m))
    if not out_p:
        return np.zeros((0, 2)), np.zeros(0)
    return np.array(out_p), np.array(out_m)


@dataclass(frozen=True)
class AtomicMeasure:
    """Finite signed combination of Dirac masses in the plane."""

    points: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float)).reshape(-1, 2)
        ms = np.asarray(self.masses, dtype=float).reshape(-1)
        if pts.shape[0] != ms.shape[0]:
            raise DomainError("points and masses differ in length")
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(ms))):
            raise DomainError("atomic measure must be finite")
        pts.setflags(write=False)
        ms.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "masses", ms)

    @classmethod
    def from_atoms(cls, atoms: Iterable[Tuple[Sequence[float], float]]) -> "AtomicMeasure":
        atoms = list(atoms)
        if not atoms:
            return cls(np.zeros((0, 2)), np.zeros(0))
        return cls(np.array([a[0] for a in atoms], dtype=float), np.array([a[1] for a in atoms], dtype=float))

    def __len__(self) -> int:
        return self.masses.shape[0]

    def total(self) -> float:
        return float(np.sum(self.masses))

    def total_variation(self) -> float:
        return float(np.sum(np.abs(self.masses)))

    def diameter(self) -> float:
        if len(self) < 2:
            return 0.0
        span = self.points.max(axis=0) - self.points.min(axis=0)
        return float(np.hypot(*span))

    def merged(self, tol: Optional[float] = None, drop_zero: bool = True) -> "AtomicMeasure":
        if tol is None:
            tol = MERGE_RTOL * max(self.diameter(), 1.0)
        pts, ms = _merge_points(self.points, self.masses, tol)
        if drop_zero and len(ms):
            scale = max(np.abs(self.masses).max(), 1e-300)
            keep = np.abs(ms) > 1e-14 * scale
            pts, ms = pts[keep], ms[keep]
        return AtomicMeasure(pts, ms)

    def positive(self) -> "AtomicMeasure":
        keep = self.masses > 0
        return AtomicMeasure(self.points[keep], self.masses[keep])

    def negative(self) -> "AtomicMeasure":
        """Negative part, returned with positive masses."""
        keep = self.masses < 0
        return AtomicMeasure(self.points[keep], -self.masses[keep])

    def __add__(self, other: "AtomicMeasure") -> "AtomicMeasure":
        return AtomicMeasure(np.vstack([self.points, other.points]), np.concatenate([self.masses, other.masses]))

    def __neg__(self) -> "AtomicMeasure":
        return AtomicMeasure(self.points, -self.masses)

    def __sub__(self, other: "AtomicMeasure") -> "AtomicMeasure":
        return self + (-other)


@dataclass(frozen=True)
class TransportGraph:
    """Directed weighted graph; each edge carries mass from tail to head."""

    vertices: np.ndarray
    edges: Tuple[Tuple[int, int, float], ...]
    domain: Optional[Tuple[float, float, float, float]] = None

    def __post_init__(self):
        verts = np.atleast_2d(np.asarray(self.vertices, dtype=float)).reshape(-1, 2)
        edges = tuple((int(a), int(b), float(m)) for a, b, m in self.edges)
        n = verts.shape[0]
        for a, b, m in edges:
            if not (0 <= a < n and 0 <= b < n):
                raise DomainError(f"edge ({a},{b}) references a missing vertex")
            if a == b:
                raise DomainError(f"edge ({a},{b}) has coincident endpoints")
            if not m > 0:
                raise DomainError(f"edge ({a},{b}) has nonpositive mass {m}")
        verts.setflags(write=False)
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "edges", edges)

    def edge_vectors(self) -> np.ndarray:
        if not self.edges:
            return np.zeros((0, 2))
        a = np.array([e[0] for e in self.edges])
        b = np.array([e[1] for e in self.edges])
        return self.vertices[b] - self.vertices[a]

    def lengths(self) -> np.ndarray:
        v = self.edge_vectors()
        return np.hypot(v[:, 0], v[:, 1]) if len(v) else np.zeros(0)

    def masses(self) -> np.ndarray:
        return np.array([e[2] for e in self.edges], dtype=float)

    def diameter(self) -> float:
        if self.domain is not None:
            x0, y0, x1, y1 = self.domain
            return float(np.hypot(x1 - x0, y1 - y0))
        if len(self.vertices) < 2:
            return 1.0
        span = self.vertices.max(axis=0) - self.vertices.min(axis=0)
        return float(np.hypot(*span))

    def mass_measure(self) -> float:
        """Total mass of the vector measure, sum of mass times length."""
        return float(np.sum(self.masses() * self.lengths()))


def graph_divergence(g: TransportGraph) -> AtomicMeasure:
    """Weak divergence ``sum_e mass_e (delta_tail - delta_head)`` with coincident atoms merged."""
    pts = []
    ms = []
    for a, b, m in g.edges:
        pts.append(g.vertices[a])
        ms.append(m)
        pts.append(g.vertices[b])
        ms.append(-m)
    raw = AtomicMeasure(np.array(pts).reshape(-1, 2), np.array(ms))
    return raw.merged(MERGE_RTOL * max(g.diameter(), 1e-300))


# ---------------------------------------------------------------------------
# grids


@dataclass(frozen=True)
class GridSpec:
    nx: int
    ny: int
    Lx: float
    Ly: float

    @property
    def hx(self) -> float:
        return self.Lx / self.nx

    @property
    def hy(self) -> float:
        return self.Ly / self.ny

    @property
    def cell_area(self) -> float:
        return self.hx * self.hy

    def cell_centers(self):
        x = (np.arange(self.nx) + 0.5) * self.hx
        y = (np.arange(self.ny) + 0.5) * self.hy
        return np.meshgrid(x, y, indexing="ij")

    def ux_points(self):
        x = np.arange(self.nx + 1) * self.hx
        y = (np.arange(self.ny) + 0.5) * self.hy
        return np.meshgrid(x, y, indexing="ij")

    def uy_points(self):
        x = (np.arange(self.nx) + 0.5) * self.hx
        y = np.arange(self.ny + 1) * self.hy
        return np.meshgrid(x, y, indexing="ij")

    def zeros_scalar(self) -> "ScalarGrid":
        return ScalarGrid(self, np.zeros((self.nx, self.ny)))

    def zeros_field(self) -> "GridField":
        return GridField(self, np.zeros((self.nx + 1, self.ny)), np.zeros((self.nx, self.ny + 1)))


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ScalarGrid:
    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        v = _frozen(self.values)
        if v.shape != (self.spec.nx, self.spec.ny):
            raise DomainError(f"scalar grid shape {v.shape} != {(self.spec.nx, self.spec.ny)}")
        if not np.all(np.isfinite(v)):
            raise DomainError("scalar grid contains non-finite values")
        object.__setattr__(self, "values", v)

    def integral(self) -> float:
        return float(np.sum(self.values) * self.spec.cell_area)

    def norm(self, p: float = 2.0) -> float:
        a = self.spec.cell_area
        v = np.abs(self.values)
        if np.isinf(p):
            return float(v.max()) if v.size else 0.0
        return float((np.sum(v ** p) * a) ** (1.0 / p))

    def __add__(self, other: "ScalarGrid") -> "ScalarGrid":
        return ScalarGrid(self.spec, self.values + other.values)

    def __sub__(self, other: "ScalarGrid") -> "ScalarGrid":
        return ScalarGrid(self.spec, self.values - other.values)

    def __mul__(self, c: float) -> "ScalarGrid":
        return ScalarGrid(self.spec, self.values * c)

    __rmul__ = __mul__


@dataclass(frozen=True)
class GridField:
    spec: GridSpec
    ux: np.ndarray
    uy: np.ndarray

    def __post_init__(self):
        ux = _frozen(self.ux)
        uy = _frozen(self.uy)
        s = self.spec
        if ux.shape != (s.nx + 1, s.ny) or uy.shape != (s.nx, s.ny + 1):
            raise DomainError(f"field shapes {ux.shape}, {uy.shape} inconsistent with {s}")
        if not (np.all(np.isfinite(ux)) and np.all(np.isfinite(uy))):
            raise DomainError("grid field contains non-finite values")
        object.__setattr__(self, "ux", ux)
        object.__setattr__(self, "uy", uy)

    def __add__(self, other: "GridField") -> "GridField":
        return GridField(self.spec, self.ux + other.ux, self.uy + other.uy)

    def __sub__(self, other: "GridField") -> "GridField":
        return GridField(self.spec, self.ux - other.ux, self.uy - other.uy)

    def __mul__(self, c: float) -> "GridField":
        return GridField(self.spec, self.ux * c, self.uy * c)

    __rmul__ = __mul__

    def __neg__(self) -> "GridField":
        return GridField(self.spec, -self.ux, -self.uy)

    def cell_components(self) -> Tuple[np.ndarray, np.ndarray]:
        """Face values averaged to cell centres."""
        return 0.5 * (self.ux[:-1] + self.ux[1:]), 0.5 * (self.uy[:, :-1] + self.uy[:, 1:])

    def cell_magnitude(self) -> np.ndarray:
        cx, cy = self.cell_components()
        return np.hypot(cx, cy)

    def boundary_flux_max(self) -> float:
        return float(
            max(np.abs(self.ux[0]).max(), np.abs(self.ux[-1]).max(), np.abs(self.uy[:, 0]).max(), np.abs(self.uy[:, -1]).max())
        )


def grid_divergence(u: GridField) -> ScalarGrid:
    s = u.spec
    div = (u.ux[1:] - u.ux[:-1]) / s.hx + (u.uy[:, 1:] - u.uy[:, :-1]) / s.hy
    return ScalarGrid(s, div)


def grid_gradient(phi: ScalarGrid) -> GridField:
    """Face gradient of a cell scalar; boundary faces are left at zero (no-flux)."""
    s = phi.spec
    v = phi.values
    ux = np.zeros((s.nx + 1, s.ny))
    uy = np.zeros((s.nx, s.ny + 1))
    ux[1:-1] = (v[1:] - v[:-1]) / s.hx
    uy[:, 1:-1] = (v[:, 1:] - v[:, :-1]) / s.hy
    return GridField(s, ux, uy)


def field_norms(u: GridField, p: float) -> float:
    """Midpoint rule for ``int |u|^p`` (``p`` in {1, 2}) or ``max |u|`` for ``p = inf``."""
    mag = u.cell_magnitude()
    if np.isinf(p):
        return float(mag.max()) if mag.size else 0.0
    if p not in (1, 2):
        raise DomainError(f"field_norms supports p in {{1, 2, inf}}, got {p}")
    return float(np.sum(mag ** p) * u.spec.cell_area)


def sample_scalar(spec: GridSpec, func) -> ScalarGrid:
    X, Y = spec.cell_centers()
    return ScalarGrid(spec, func(X, Y))


def sample_field(spec: GridSpec, fx, fy) -> GridField:
    X, Y = spec.ux_points()
    ux = fx(X, Y)
    X, Y = spec.uy_points()
    uy = fy(X, Y)
    return GridField(spec, ux, uy)


def embed_field(small: GridField, big: GridSpec, i0: int, j0: int) -> GridField:
    """Place a window field into a larger grid with the window's lower-left cell at ``(i0, j0)``."""
    ux = np.zeros((big.nx + 1, big.ny))
    uy = np.zeros((big.nx, big.ny + 1))
    s = small.spec
    ux[i0:i0 + s.nx + 1, j0:j0 + s.ny] = small.ux
    uy[i0:i0 + s.nx, j0:j0 + s.ny + 1] = small.uy
    return GridField(big, ux, uy)


def window_spec(spec: GridSpec, window: Window) -> GridSpec:
    i0, i1, j0, j1 = window
    return GridSpec(i1 - i0, j1 - j0, (i1 - i0) * spec.hx, (j1 - j0) * spec.hy)


def check_window(spec: GridSpec, window: Optional[Window]) -> Window:
    if window is None:
        return (0, spec.nx, 0, spec.ny)
    i0, i1, j0, j1 = (int(w) for w in window)
    if not (0 <= i0 < i1 <= spec.nx and 0 <= j0 < j1 <= spec.ny):
        raise DomainError(f"window {window} outside grid {spec.nx}x{spec.ny}")
    return (i0, i1, j0, j1)

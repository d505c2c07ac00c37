import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from branchflow.core import (
    AtomicMeasure,
    DomainError,
    GridField,
    GridSpec,
    ScalarGrid,
    TransportGraph,
    exponents,
    field_norms,
    graph_divergence,
    grid_divergence,
    grid_gradient,
    sample_field,
)


def atoms_dict(m: AtomicMeasure):
    return {tuple(np.round(p, 12)): v for p, v in zip(m.points, m.masses)}


class TestExponents:
    def test_planar_three_quarters(self):
        ep = exponents(0.75, 2)
        assert ep.beta == pytest.approx(4 / 7, abs=1e-12)
        assert ep.gamma1 == pytest.approx(0.25, abs=1e-15)
        assert ep.gamma2 == pytest.approx(1.75, abs=1e-15)
        assert ep.gamma == pytest.approx(7 / 12, abs=1e-12)

    def test_lower_boundary_rejected(self):
        with pytest.raises(DomainError, match="0.5 < alpha"):
            exponents(0.5, 2)

    def test_upper_boundary_and_dimension_rejected(self):
        with pytest.raises(DomainError):
            exponents(1.0, 2)
        with pytest.raises(DomainError, match="d="):
            exponents(0.9, 1)

    def test_three_dimensional_example(self):
        ep = exponents(0.9, 3)
        assert ep.beta == pytest.approx(1.4 / 1.8, abs=1e-12)
        assert ep.gamma1 == pytest.approx(0.2, abs=1e-12)
        assert ep.gamma2 == pytest.approx(1.8, abs=1e-12)
        assert ep.gamma == pytest.approx(0.45, abs=1e-12)
        assert 2 / (6 - ep.beta * 2) == pytest.approx(0.45, abs=1e-12)

    def test_planar_closed_forms(self):
        for a in np.linspace(0.51, 0.99, 17):
            ep = exponents(a, 2)
            assert ep.beta == pytest.approx((4 * a - 2) / (a + 1), abs=1e-13)
            assert ep.gamma1 == pytest.approx(1 - a, abs=1e-15)
            assert ep.gamma2 == pytest.approx(a + 1, abs=1e-15)

    @settings(max_examples=300, deadline=None)
    @given(st.integers(2, 8), st.floats(1e-6, 1 - 1e-6))
    def test_random_valid_pairs(self, d, t):
        lo = 1 - 1 / d
        a = lo + t * (1 - lo)
        if not lo < a < 1:
            return
        ep = exponents(a, d)
        assert 0 < ep.beta < 1
        assert abs(ep.gamma2 - (d + 1) * ep.gamma) <= 1e-12
        assert abs(ep.gamma - 2 / (2 * d - ep.beta * (d - 1))) <= 1e-12

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0.5 + 1e-9, 1 - 1e-9))
    def test_planar_identities(self, a):
        ep = exponents(a, 2)
        assert abs(a - (3 * ep.gamma - 1)) <= 1e-12
        assert abs(ep.beta * ep.gamma - (4 * ep.gamma - 2)) <= 1e-12

    def test_tube_radius(self):
        ep = exponents(0.75, 2)
        assert ep.tube_radius(1.0, 1.0) == pytest.approx(1.0)
        r1 = ep.tube_radius(1.0, 0.1)
        r2 = ep.tube_radius(2.0, 0.1)
        assert r2 / r1 == pytest.approx(2 ** (1 - ep.gamma), rel=1e-12)


class TestGraphDivergence:
    def test_single_edge(self):
        g = TransportGraph([[0, 0], [1, 0]], [(0, 1, 1.0)])
        assert atoms_dict(graph_divergence(g)) == {(0.0, 0.0): 1.0, (1.0, 0.0): -1.0}

    def test_telescoping(self):
        g = TransportGraph([[0, 0], [1, 0], [2, 1]], [(0, 1, 1.0), (1, 2, 1.0)])
        assert atoms_dict(graph_divergence(g)) == {(0.0, 0.0): 1.0, (2.0, 1.0): -1.0}

    def test_y_graph(self):
        g = TransportGraph([[0, 0], [0, 1], [-1, 2], [1, 2]], [(0, 1, 1.0), (1, 2, 0.5), (1, 3, 0.5)])
        assert atoms_dict(graph_divergence(g)) == {(0.0, 0.0): 1.0, (-1.0, 2.0): -0.5, (1.0, 2.0): -0.5}

    def test_invalid_edges(self):
        with pytest.raises(DomainError):
            TransportGraph([[0, 0], [1, 0]], [(0, 0, 1.0)])
        with pytest.raises(DomainError):
            TransportGraph([[0, 0], [1, 0]], [(0, 1, 0.0)])
        with pytest.raises(DomainError):
            TransportGraph([[0, 0], [1, 0]], [(0, 2, 1.0)])

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_total_mass_zero(self, seed):
        rng = np.random.default_rng(seed)
        n = rng.integers(2, 8)
        verts = rng.integers(0, 4, size=(n, 2)).astype(float)
        edges = []
        for _ in range(rng.integers(1, 10)):
            a, b = rng.choice(n, size=2, replace=False)
            if np.any(verts[a] != verts[b]):
                edges.append((a, b, float(rng.uniform(0.1, 2))))
        if not edges:
            return
        div = graph_divergence(TransportGraph(verts, edges))
        assert abs(div.total()) <= 1e-12


class TestAtomicMeasure:
    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_merge_preserves_mass(self, seed):
        rng = np.random.default_rng(seed)
        pts = rng.integers(0, 3, size=(12, 2)).astype(float)
        ms = rng.normal(size=12)
        m = AtomicMeasure(pts, ms)
        mm = m.merged(drop_zero=False)
        assert mm.total() == pytest.approx(m.total(), abs=1e-12)
        assert len(mm) == len({tuple(p) for p in pts})

    def test_parts(self):
        m = AtomicMeasure([[0, 0], [1, 0]], [2.0, -3.0])
        assert m.positive().total() == 2.0
        assert m.negative().total() == 3.0
        assert (m - m).merged().total_variation() == 0.0


def loop_divergence(u: GridField) -> np.ndarray:
    s = u.spec
    out = np.zeros((s.nx, s.ny))
    for i in range(s.nx):
        for j in range(s.ny):
            out[i, j] = (u.ux[i + 1, j] - u.ux[i, j]) / s.hx + (u.uy[i, j + 1] - u.uy[i, j]) / s.hy
    return out


def loop_neumann_laplacian(v: np.ndarray, hx: float, hy: float) -> np.ndarray:
    nx, ny = v.shape
    out = np.zeros_like(v)
    for i in range(nx):
        for j in range(ny):
            acc = 0.0
            if i > 0:
                acc += (v[i - 1, j] - v[i, j]) / hx ** 2
            if i < nx - 1:
                acc += (v[i + 1, j] - v[i, j]) / hx ** 2
            if j > 0:
                acc += (v[i, j - 1] - v[i, j]) / hy ** 2
            if j < ny - 1:
                acc += (v[i, j + 1] - v[i, j]) / hy ** 2
            out[i, j] = acc
    return out


class TestGridCalculus:
    spec = GridSpec(13, 9, 1.3, 0.7)

    def test_constant_field_divergence_free(self):
        u = sample_field(self.spec, lambda x, y: 0 * x + 2.0, lambda x, y: 0 * x - 1.0)
        assert np.all(grid_divergence(u).values == 0.0)

    def test_linear_field_divergence_two(self):
        u = sample_field(self.spec, lambda x, y: x, lambda x, y: y)
        np.testing.assert_allclose(grid_divergence(u).values, 2.0, atol=1e-12)

    def test_random_divergence_matches_loop(self):
        rng = np.random.default_rng(3)
        s = self.spec
        u = GridField(s, rng.normal(size=(s.nx + 1, s.ny)), rng.normal(size=(s.nx, s.ny + 1)))
        np.testing.assert_allclose(grid_divergence(u).values, loop_divergence(u), atol=1e-14 * 100, rtol=1e-14)

    def test_div_grad_is_five_point_laplacian(self):
        rng = np.random.default_rng(4)
        s = self.spec
        phi = ScalarGrid(s, rng.normal(size=(s.nx, s.ny)))
        lap = grid_divergence(grid_gradient(phi)).values
        ref = loop_neumann_laplacian(phi.values, s.hx, s.hy)
        assert np.abs(lap - ref).max() <= 1e-13 * np.abs(ref).max()

    def test_adjointness(self):
        rng = np.random.default_rng(5)
        s = self.spec
        phi = ScalarGrid(s, rng.normal(size=(s.nx, s.ny)))
        ux = rng.normal(size=(s.nx + 1, s.ny))
        uy = rng.normal(size=(s.nx, s.ny + 1))
        ux[0] = ux[-1] = 0
        uy[:, 0] = uy[:, -1] = 0
        u = GridField(s, ux, uy)
        g = grid_gradient(phi)
        lhs = np.sum(g.ux * u.ux) + np.sum(g.uy * u.uy)
        rhs = -np.sum(phi.values * grid_divergence(u).values)
        assert lhs == pytest.approx(rhs, rel=1e-12)


class TestFieldNorms:
    def test_zero_field(self):
        u = GridSpec(8, 8, 1, 1).zeros_field()
        for p in (1, 2, np.inf):
            assert field_norms(u, p) == 0.0

    def test_unit_constant(self):
        s = GridSpec(10, 10, 1.0, 1.0)
        u = sample_field(s, lambda x, y: 0 * x + 1.0, lambda x, y: 0 * x)
        assert field_norms(u, 1) == pytest.approx(1.0, abs=1e-14)
        assert field_norms(u, 2) == pytest.approx(1.0, abs=1e-14)
        assert field_norms(u, np.inf) == pytest.approx(1.0, abs=1e-14)

    def test_unsupported_exponent(self):
        with pytest.raises(DomainError):
            field_norms(GridSpec(4, 4, 1, 1).zeros_field(), 3)

    def test_second_order_convergence(self):
        # int_0^1 int_0^1 (sin^2(pi x) + cos^2(pi y) x^2) dx dy = 1/2 + 1/6
        exact = 0.5 + 1.0 / 6.0
        errs = []
        for n in (16, 32, 64, 128):
            s = GridSpec(n, n, 1.0, 1.0)
            u = sample_field(s, lambda x, y: np.sin(np.pi * x), lambda x, y: np.cos(np.pi * y) * x)
            errs.append(abs(field_norms(u, 2) - exact))
        rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        assert np.all(rates > 1.8), rates

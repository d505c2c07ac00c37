import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from branchflow.core import DomainError, GridField, GridSpec, TransportGraph, exponents, sample_field
from branchflow.energy import (
    EXACT,
    SmoothingParams,
    inner,
    malpha_eps,
    malpha_eps_gradient,
    malpha_graph,
)
from branchflow.profile import rescale_profile, solve_profile

EP = exponents(0.75, 2)


def golden_min(fun, lo, hi, tol=1e-10):
    g = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = fun(c), fun(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = fun(d)
    x = 0.5 * (a + b)
    return x, fun(x)


def random_field(spec, seed):
    rng = np.random.default_rng(seed)
    return GridField(spec, rng.normal(size=(spec.nx + 1, spec.ny)), rng.normal(size=(spec.nx, spec.ny + 1)))


class TestGraphEnergy:
    def test_single_edge(self):
        g = TransportGraph([[0, 0], [1, 0]], [(0, 1, 1.0)])
        for a in (0.3, 0.6, 0.99):
            assert malpha_graph(g, a) == pytest.approx(1.0)

    def test_two_disjoint_edges(self):
        g = TransportGraph([[0, 0], [1, 0], [0, 1], [0, 3]], [(0, 1, 0.5), (2, 3, 0.25)])
        assert malpha_graph(g, 0.5) == pytest.approx(math.sqrt(0.5) + 1.0, abs=1e-12)

    def test_y_beats_v(self):
        alpha = 0.6

        def y_energy(h):
            return 2 * 0.5 ** alpha * math.hypot(0.5, 1 - h) + h

        h_best, e_best = golden_min(y_energy, 0.0, 1.0)
        v_energy = 2 * 0.5 ** 0.6 * math.sqrt(1.25)
        assert v_energy == pytest.approx(1.4749, abs=1e-3)
        verts = [[-0.5, 1], [0.5, 1], [0, h_best], [0, 0]]
        g_y = TransportGraph(verts, [(0, 2, 0.5), (1, 2, 0.5), (2, 3, 1.0)])
        g_v = TransportGraph([[-0.5, 1], [0.5, 1], [0, 0]], [(0, 2, 0.5), (1, 2, 0.5)])
        assert malpha_graph(g_v, alpha) == pytest.approx(v_energy, rel=1e-12)
        assert malpha_graph(g_y, alpha) == pytest.approx(e_best, rel=1e-12)
        assert e_best < v_energy - 1e-3
        assert 0 < h_best < 1

    def test_collinear_overlap_merges(self):
        # [0,2] carries 1 and [1,3] carries 1: overlap [1,2] carries 2
        g = TransportGraph([[0, 0], [2, 0], [1, 0], [3, 0]], [(0, 1, 1.0), (2, 3, 1.0)])
        assert malpha_graph(g, 0.5) == pytest.approx(1 + math.sqrt(2) + 1, abs=1e-12)

    def test_opposite_overlap_cancels(self):
        g = TransportGraph([[0, 0], [2, 0]], [(0, 1, 1.0), (1, 0, 1.0)])
        assert malpha_graph(g, 0.5) == pytest.approx(0.0, abs=1e-12)

    def test_alpha_out_of_range(self):
        g = TransportGraph([[0, 0], [1, 0]], [(0, 1, 1.0)])
        with pytest.raises(DomainError):
            malpha_graph(g, 0.0)


class TestPhaseFieldEnergy:
    def test_zero_field(self):
        e = malpha_eps(GridSpec(8, 8, 1, 1).zeros_field(), EP, 0.1)
        assert (e.lower_order, e.dirichlet, e.total) == (0.0, 0.0, 0.0)

    def test_constant_unit_field(self):
        s = GridSpec(16, 16, 1.0, 1.0)
        u = sample_field(s, lambda x, y: 0 * x + 1.0, lambda x, y: 0 * x)
        e = malpha_eps(u, EP, 1.0, smoothing=EXACT)
        assert e.lower_order == pytest.approx(1.0, abs=1e-14)
        assert e.dirichlet == 0.0
        assert e.total == pytest.approx(1.0, abs=1e-14)

    def test_bad_eps(self):
        with pytest.raises(DomainError):
            malpha_eps(GridSpec(4, 4, 1, 1).zeros_field(), EP, 0.0)

    def test_window_out_of_range(self):
        with pytest.raises(DomainError):
            malpha_eps(GridSpec(4, 4, 1, 1).zeros_field(), EP, 0.1, window=(0, 5, 0, 4))

    def test_extruded_ridge_matches_profile(self):
        p = solve_profile(EP.beta)
        theta, eps = 0.7, 0.05
        rp = rescale_profile(p, theta, eps, EP)
        s = GridSpec(8, 1024, 1.0, 1.0)
        u = sample_field(s, lambda x, y: np.interp(y - 0.5, rp.x, rp.w, left=0, right=0), lambda x, y: 0 * x)
        e = malpha_eps(u, EP, eps)
        assert e.total / s.Lx == pytest.approx(theta ** EP.alpha * p.c0, rel=1e-4)

    def test_scaling_invariance(self):
        p = solve_profile(EP.beta)
        s = GridSpec(4, 2048, 1.0, 1.0)
        vals = []
        for theta, eps in [(0.3, 0.02), (1.0, 0.05), (2.0, 0.01)]:
            rp = rescale_profile(p, theta, eps, EP)
            u = sample_field(s, lambda x, y: np.interp(y - 0.5, rp.x, rp.w, left=0, right=0), lambda x, y: 0 * x)
            vals.append(malpha_eps(u, EP, eps).total / theta ** EP.alpha)
        assert max(vals) / min(vals) - 1 < 1e-3


class TestEnergyProperties:
    spec = GridSpec(12, 10, 1.2, 1.0)

    def test_window_additivity(self):
        s = self.spec
        u = random_field(s, 0)
        whole = malpha_eps(u, EP, 0.3)
        parts = [malpha_eps(u, EP, 0.3, window=w) for w in [(0, 5, 0, 4), (5, 12, 0, 4), (0, 5, 4, 10), (5, 12, 4, 10)]]
        assert sum(p.lower_order for p in parts) == pytest.approx(whole.lower_order, rel=1e-13)
        seam = (
            np.sum(np.diff(u.ux, axis=0)[4:6] ** 2) / s.hx ** 2
            + np.sum(np.diff(u.uy, axis=0)[4] ** 2) / s.hx ** 2
            + np.sum(np.diff(u.ux, axis=1)[:, 3] ** 2) / s.hy ** 2
            + np.sum(np.diff(u.uy, axis=1)[:, 3:5] ** 2) / s.hy ** 2
        ) * s.cell_area * 0.3 ** EP.gamma2
        gap = whole.dirichlet - sum(p.dirichlet for p in parts)
        assert -1e-12 <= gap <= seam + 1e-12

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
    def test_monotone_in_delta(self, seed, d1, d2):
        u = random_field(self.spec, seed)
        lo, hi = sorted((d1, d2))
        a = malpha_eps(u, EP, 0.2, smoothing=SmoothingParams(lo)).lower_order
        b = malpha_eps(u, EP, 0.2, smoothing=SmoothingParams(hi)).lower_order
        assert a <= b * (1 + 1e-14)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6), st.floats(0.01, 2.0))
    def test_pseudo_subadditivity(self, seed, eps):
        u1 = random_field(self.spec, seed)
        u2 = random_field(self.spec, seed + 1) * 3.0
        lhs = malpha_eps(u1 + u2, EP, eps).total
        rhs = 2 * (malpha_eps(u1, EP, eps).total + malpha_eps(u2, EP, eps).total)
        assert lhs <= rhs

    def test_negative_delta_rejected(self):
        with pytest.raises(DomainError):
            SmoothingParams(-1.0)


class TestGradient:
    spec = GridSpec(16, 12, 1.0, 0.8)

    def test_requires_smoothing(self):
        with pytest.raises(DomainError, match="smoothing"):
            malpha_eps_gradient(self.spec.zeros_field(), EP, 0.1, EXACT)

    def test_zero_field(self):
        g = malpha_eps_gradient(self.spec.zeros_field(), EP, 0.1, SmoothingParams(1e-3))
        assert not np.any(g.ux) and not np.any(g.uy)

    @pytest.mark.parametrize("seed", range(5))
    def test_finite_difference(self, seed):
        sm = SmoothingParams(1e-2)
        u = random_field(self.spec, seed)
        h = random_field(self.spec, seed + 100)
        t = 1e-6
        g = malpha_eps_gradient(u, EP, 0.1, sm)
        fd = (malpha_eps(u + h * t, EP, 0.1, smoothing=sm).total - malpha_eps(u - h * t, EP, 0.1, smoothing=sm).total) / (2 * t)
        assert inner(g, h) == pytest.approx(fd, rel=1e-5)

    def test_constant_field_interior(self):
        s = self.spec
        c = (0.3, -0.4)
        u = sample_field(s, lambda x, y: 0 * x + c[0], lambda x, y: 0 * x + c[1])
        delta, eps = 0.05, 0.2
        g = malpha_eps_gradient(u, EP, eps, SmoothingParams(delta))
        w = eps ** (-EP.gamma1) * EP.beta * (0.25 + delta ** 2) ** (EP.beta / 2 - 1)
        np.testing.assert_allclose(g.ux[1:-1], w * c[0], rtol=1e-13)
        np.testing.assert_allclose(g.uy[:, 1:-1], w * c[1], rtol=1e-13)

import itertools
import math

import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given
from scipy import integrate

from parampde.fem import (
    ElementField,
    FeSpace,
    GridFunction,
    HierarchicalBasis,
    assemble_stiffness,
    best_nterm_spatial,
    dyadic_space,
    load_vector,
    measure_spatial_rate,
    norm_L2,
    norm_Ltau,
    norm_V,
    project,
    projection_error_sq,
    solve_dirichlet,
)
from parampde.fitting import FitError, decades, fit_rate


def _sin(x):
    return np.sin(np.pi * x)


class TestSpace:
    @pytest.mark.parametrize("n_el,deg", [(1, 2), (4, 1), (8, 2), (33, 1)])
    def test_dof_count(self, n_el, deg):
        assert FeSpace(n_el, deg).ndof == deg * n_el - 1

    def test_invalid(self):
        with pytest.raises(ValueError):
            FeSpace(0, 1)
        with pytest.raises(ValueError):
            FeSpace(4, 3)

    def test_nesting(self):
        assert FeSpace(4, 1).nested_in(FeSpace(16, 2))
        assert not FeSpace(16, 1).nested_in(FeSpace(8, 1))
        assert not FeSpace(8, 2).nested_in(FeSpace(8, 1))

    def test_dyadic_space(self):
        fine = FeSpace(1024, 2)
        sp = dyadic_space(100, 2, fine)
        assert sp.ndof <= 100 < FeSpace(2 * sp.n_el, 2).ndof
        assert sp.nested_in(fine)


class TestAssembly:
    def test_p1_hand_assembly(self):
        K = assemble_stiffness(FeSpace(4, 1), 1.0).toarray()
        h = 0.25
        expected = (np.diag([2.0] * 3) - np.diag([1.0] * 2, 1) - np.diag([1.0] * 2, -1)) / h
        np.testing.assert_allclose(K, expected, atol=1e-13)

    def test_p2_single_element(self):
        # reference P2 stiffness [[7,-8,1],[-8,16,-8],[1,-8,7]]/(3h); keep the interior row and column
        K = assemble_stiffness(FeSpace(1, 2), 1.0).toarray()
        np.testing.assert_allclose(K, [[16.0 / 3.0]], rtol=1e-14)
        K2 = assemble_stiffness(FeSpace(2, 2), 1.0).toarray()
        h = 0.5
        expected = np.array([[16, -8, 0], [-8, 14, -8], [0, -8, 16]]) / (3 * h)
        np.testing.assert_allclose(K2, expected, atol=1e-12)

    @pytest.mark.parametrize("deg", [1, 2])
    def test_symmetric_and_linear(self, deg):
        sp = FeSpace(16, deg)
        a = lambda x: 1.0 + x + 0.5 * np.sin(3 * x)
        K = assemble_stiffness(sp, a)
        assert abs(K - K.T).max() < 1e-12 * abs(K).max()
        K2 = assemble_stiffness(sp, lambda x: 2 * a(x))
        np.testing.assert_allclose(K2.toarray(), 2 * K.toarray(), rtol=1e-14, atol=1e-12)
        assert np.all(np.linalg.eigvalsh(K.toarray()) > 0)

    def test_nonpositive_coefficient_names_element(self):
        sp = FeSpace(8, 1)
        with pytest.raises(ValueError, match="element 7"):
            assemble_stiffness(sp, lambda x: np.where(x > 0.9, -1.0, 1.0))

    def test_exact_for_linear_coefficient(self):
        # int_0^1 (1 + x) phi_i' phi_j' against a hand integral on each element
        sp = FeSpace(4, 1)
        K = assemble_stiffness(sp, lambda x: 1.0 + x).toarray()
        h = 0.25
        mid = lambda e: 1.0 + (e + 0.5) * h
        assert K[0, 0] == pytest.approx((mid(0) + mid(1)) / h, rel=1e-14)
        assert K[0, 1] == pytest.approx(-mid(1) / h, rel=1e-14)


class TestSolve:
    @pytest.mark.parametrize("deg", [1, 2])
    def test_nodal_exactness(self, deg):
        sp = FeSpace(16, deg)
        u = solve_dirichlet(sp, 1.0, 1.0)
        x = sp.dof_nodes
        np.testing.assert_allclose(u.coeffs, x * (1 - x) / 2, atol=1e-13)

    def test_zero_load(self):
        u = solve_dirichlet(FeSpace(8, 2), 1.0, 0.0)
        assert np.all(u.coeffs == 0)

    @given(st.floats(-5, 5))
    def test_linear_in_load(self, c):
        sp = FeSpace(8, 1)
        u1 = solve_dirichlet(sp, lambda x: 1 + x, 1.0)
        uc = solve_dirichlet(sp, lambda x: 1 + x, c)
        np.testing.assert_allclose(uc.coeffs, c * u1.coeffs, atol=1e-14)

    @pytest.mark.parametrize("deg,n_el", [(1, 32), (2, 16)])
    def test_galerkin_orthogonality(self, deg, n_el):
        a = lambda x: 1.0 + x
        up = lambda x: np.pi * np.cos(np.pi * x)
        f = lambda x: -np.pi * np.cos(np.pi * x) + (1 + x) * np.pi**2 * np.sin(np.pi * x)
        sp = FeSpace(n_el, deg)
        uh = solve_dirichlet(sp, a, f)
        energy_u = integrate.quad(lambda x: a(x) * up(x) ** 2, 0, 1, epsabs=1e-14)[0]
        energy_uh = float(uh.coeffs @ (assemble_stiffness(sp, a) @ uh.coeffs))
        err = 0.0
        for e in range(n_el):
            lo, hi = e / n_el, (e + 1) / n_el
            g = lambda x: a(x) * (up(x) - sp.derivative_matrix(np.array([min(max(x, lo + 1e-15), hi - 1e-15)])) @ uh.coeffs)[0] ** 2
            err += integrate.quad(g, lo, hi, epsabs=1e-15, epsrel=1e-13)[0]
        # the load is integrated with 3 Gauss points; the identity holds to quadrature accuracy
        assert abs(energy_u - energy_uh - err) < 1e-8 * energy_u


class TestNorms:
    def test_zero(self):
        assert norm_V(GridFunction.zero(FeSpace(4, 2))) == 0.0

    def test_norm_v_of_parabola(self):
        sp = FeSpace(256, 1)
        u = GridFunction.interpolate(sp, lambda x: x * (1 - x) / 2)
        assert abs(norm_V(u) - 1 / math.sqrt(12)) <= sp.h**2

    @given(st.integers(0, 2**32 - 1))
    def test_triangle_inequality(self, seed):
        r = np.random.default_rng(seed)
        sp = FeSpace(8, 2)
        u, v = GridFunction(sp, r.normal(size=sp.ndof)), GridFunction(sp, r.normal(size=sp.ndof))
        assert norm_V(u + v) <= norm_V(u) + norm_V(v) + 1e-12

    @pytest.mark.parametrize("tau", [1.0, 1.5, 2.0, 3.0, 7.5])
    def test_constant_field(self, tau):
        f = ElementField(FeSpace(7, 1), -np.ones((7, 3)))
        assert norm_Ltau(f, tau) == pytest.approx(1.0, rel=1e-14)

    @given(st.integers(0, 2**32 - 1), st.floats(-4, 4), st.floats(1.0, 5.0))
    def test_ltau_consistency_and_homogeneity(self, seed, c, tau):
        sp = FeSpace(5, 2)
        f = ElementField(sp, np.random.default_rng(seed).normal(size=(5, 3)))
        assert norm_Ltau(f, 2.0) == pytest.approx(norm_L2(f), rel=1e-12)
        assert norm_Ltau(f * c, tau) == pytest.approx(abs(c) * norm_Ltau(f, tau), rel=1e-12, abs=1e-12)

    def test_tau_below_one_rejected(self):
        with pytest.raises(ValueError):
            norm_Ltau(ElementField(FeSpace(2, 1), np.ones((2, 3))), 0.5)


class TestProjection:
    def test_identity_and_idempotence(self):
        fine = FeSpace(64, 2)
        u = GridFunction.interpolate(fine, _sin)
        assert np.array_equal(project(u, fine).coeffs, u.coeffs)
        coarse = FeSpace(8, 1)
        p = project(u, coarse)
        np.testing.assert_allclose(project(p, coarse).coeffs, p.coeffs, atol=1e-14)

    def test_non_nested_rejected(self):
        u = GridFunction.interpolate(FeSpace(12, 1), _sin)
        with pytest.raises(ValueError):
            project(u, FeSpace(8, 1))

    def test_v_orthogonality(self):
        fine = FeSpace(64, 2)
        u = GridFunction.interpolate(fine, _sin)
        coarse = FeSpace(8, 2)
        p = project(u, coarse)
        pf = project(u, fine)  # copy
        # Pythagoras: ||u||^2 = ||Pu||^2 + ||u - Pu||^2
        lhs = norm_V(pf) ** 2
        rhs = norm_V(p) ** 2 + projection_error_sq(u.coeffs, fine, coarse)
        assert lhs == pytest.approx(rhs, rel=1e-12)

    @pytest.mark.parametrize("deg,target", [(1, 1.0), (2, 2.0)])
    def test_spatial_rate_on_sine(self, deg, target):
        fine = FeSpace(4096, 2)
        u = GridFunction.interpolate(fine, _sin)
        pts = []
        for n_el in [8, 16, 32, 64, 128, 256]:
            c = FeSpace(n_el, deg)
            pts.append((c.ndof, math.sqrt(projection_error_sq(u.coeffs, fine, c))))
        assert abs(measure_spatial_rate(pts) - target) <= 0.1


class TestHierarchical:
    @given(st.integers(1, 7), st.integers(0, 2**32 - 1))
    def test_round_trip(self, L, seed):
        hb = HierarchicalBasis(L)
        u = np.random.default_rng(seed).normal(size=hb.size)
        np.testing.assert_allclose(hb.to_nodal(hb.to_hierarchical(u)), u, atol=1e-12)

    @pytest.mark.parametrize("L", [1, 3, 5])
    def test_stiffness_is_diagonal(self, L):
        hb = HierarchicalBasis(L)
        K = hb.stiffness()
        off = K - np.diag(np.diag(K))
        assert np.abs(off).max() < 1e-12 * np.abs(K).max()
        np.testing.assert_allclose(np.diag(K), 2.0 ** (hb.level + 2), rtol=1e-12)

    @given(st.integers(0, 2**32 - 1))
    def test_energy_parseval(self, seed):
        hb = HierarchicalBasis(5)
        u = GridFunction(hb.space, np.random.default_rng(seed).normal(size=hb.size))
        e = hb.energy_coefficients(u.coeffs)
        assert float(np.sum(e**2)) == pytest.approx(norm_V(u) ** 2, rel=1e-12)

    def test_nterm_full_and_single(self):
        hb = HierarchicalBasis(4)
        u = GridFunction.interpolate(hb.space, _sin)
        assert np.array_equal(best_nterm_spatial(u, hb, hb.size + 5).coeffs, u.coeffs)
        c = np.zeros(hb.size)
        c[6] = 2.5
        single = GridFunction(hb.space, hb.to_nodal(c))
        np.testing.assert_allclose(best_nterm_spatial(single, hb, 1).coeffs, single.coeffs, atol=1e-14)

    def test_nterm_errors_nonincreasing(self):
        hb = HierarchicalBasis(6)
        u = GridFunction.interpolate(hb.space, lambda x: np.abs(x - 1 / 3) ** 0.7 - (1 / 3) ** 0.7 * (1 - x)
                                     - (2 / 3) ** 0.7 * x)
        errs = [norm_V(u - best_nterm_spatial(u, hb, n)) for n in range(hb.size + 1)]
        assert all(b <= a + 1e-14 for a, b in zip(errs, errs[1:]))
        assert errs[-1] < 1e-12

    @given(st.integers(0, 2**32 - 1), st.integers(1, 6))
    def test_nterm_beats_every_subset(self, seed, n):
        hb = HierarchicalBasis(3)
        u = GridFunction(hb.space, np.random.default_rng(seed).normal(size=hb.size))
        best = norm_V(u - best_nterm_spatial(u, hb, n))
        coeffs = hb.to_hierarchical(u.coeffs)
        for keep in itertools.combinations(range(hb.size), n):
            c = np.zeros(hb.size)
            c[list(keep)] = coeffs[list(keep)]
            assert best <= norm_V(u - GridFunction(hb.space, hb.to_nodal(c))) + 1e-12


class TestRateFit:
    def test_exact_power_law(self):
        n = np.array([2.0, 4, 8, 16, 32])
        assert measure_spatial_rate(zip(n, 1 / n)) == pytest.approx(1.0, abs=1e-12)
        assert measure_spatial_rate(zip(n, 7.3 * n**-2)) == pytest.approx(2.0, abs=1e-12)

    @given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
    def test_rescaling_invariance(self, a, b):
        n = np.array([3.0, 10, 30, 100, 300])
        e = n**-1.3 * (1 + 0.1 * np.sin(n))
        assert fit_rate(a * n, b * e).rate == pytest.approx(fit_rate(n, e).rate, abs=1e-10)

    def test_noisy_synthetic(self):
        r = np.random.default_rng(7)
        n = np.logspace(1, 4, 30)
        e = 3 * n**-0.75 * np.exp(r.normal(scale=0.1, size=n.size))
        fit = fit_rate(n, e)
        assert abs(fit.rate - 0.75) <= 0.05
        assert 0.0 < fit.residual < 0.2

    def test_refuses_few_points(self):
        with pytest.raises(FitError):
            fit_rate([1, 2, 3], [1, 0.5, 0.3])

    def test_decades(self):
        assert decades([10, 1000, 31.6]) == pytest.approx(2.0)

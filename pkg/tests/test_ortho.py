import math

import hypothesis.strategies as st
import mpmath
import numpy as np
import pytest
from hypothesis import given
from scipy import integrate
from scipy.special import eval_jacobi, roots_jacobi

from parampde.coeff_model import AffineModel, LognormalModel, PiecewiseField
from parampde.fem import FeSpace, solve_dirichlet
from parampde.multiindex import MultiIndex, box_index_set, total_degree_set
from parampde.ortho import (
    OrthoFamily,
    TensorQuadrature,
    compute_coeffs,
    eval_poly,
    gauss_rule,
    gram_matrix,
    jacobi_norm_const,
    l2_error_truncation,
    parseval_check,
)

ONE = PiecewiseField.constant(1.0)
FAMILIES = [OrthoFamily.legendre(), OrthoFamily.chebyshev(), OrthoFamily.jacobi(1.5, 0.5),
            OrthoFamily.jacobi(-0.3, 2.0), OrthoFamily.hermite()]


def _moment(family: OrthoFamily, m: int) -> mpmath.mpf:
    """E[t^m] under the family's probability measure, in 50-digit arithmetic."""
    with mpmath.workdps(50):
        if family.kind == "hermite":
            return mpmath.mpf(0) if m % 2 else mpmath.fac2(m - 1) if m else mpmath.mpf(1)
        # t = 2 s - 1 with s ~ Beta(beta + 1, alpha + 1)
        a, b = mpmath.mpf(family.beta) + 1, mpmath.mpf(family.alpha) + 1
        return mpmath.fsum(mpmath.binomial(m, i) * 2**i * (-1) ** (m - i) * mpmath.beta(a + i, b) / mpmath.beta(a, b)
                           for i in range(m + 1))


def _gram_schmidt(family: OrthoFamily, K: int) -> np.ndarray:
    """Monomial coefficients of the orthonormal polynomials via Cholesky of the Hankel moment matrix."""
    with mpmath.workdps(50):
        H = mpmath.matrix([[_moment(family, i + j) for j in range(K + 1)] for i in range(K + 1)])
        Linv = mpmath.inverse(mpmath.cholesky(H))
        return np.array([[float(Linv[i, j]) for j in range(K + 1)] for i in range(K + 1)])


class TestNormalization:
    def test_c0(self):
        assert jacobi_norm_const(0, 0.7, -0.2) == 1.0

    @pytest.mark.parametrize("k", range(9))
    def test_legendre(self, k):
        assert jacobi_norm_const(k, 0.0, 0.0) == pytest.approx(math.sqrt(2 * k + 1), rel=1e-12)

    @pytest.mark.parametrize("alpha,beta", [(0.0, 0.0), (-0.5, -0.5), (1.5, 0.5), (3.0, -0.7)])
    @pytest.mark.parametrize("k", [1, 2, 5, 10])
    def test_against_classical_norm(self, alpha, beta, k):
        # c_k = 1 / ||P_k|| in L2 of the probability measure; scipy's Gauss-Jacobi rule is exact here
        x, w = roots_jacobi(k + 2, alpha, beta)
        nrm2 = np.sum(w * eval_jacobi(k, alpha, beta, x) ** 2) / np.sum(w)
        assert jacobi_norm_const(k, alpha, beta) == pytest.approx(1 / math.sqrt(nrm2), rel=1e-12)

    @pytest.mark.parametrize("alpha,beta", [(0.0, 0.0), (-0.5, -0.5), (1.5, 0.5), (3.0, -0.7)])
    @pytest.mark.parametrize("k", range(11))
    def test_against_gamma_products(self, alpha, beta, k):
        # squared norm of the classical polynomial over the unnormalized weight, divided by the weight's mass
        if k == 0:
            # the closed form has a removable pole at k = 0 when alpha + beta = -1
            assert jacobi_norm_const(0, alpha, beta) == pytest.approx(1.0, rel=1e-12)
            return
        with mpmath.workdps(40):
            a, b = mpmath.mpf(alpha), mpmath.mpf(beta)
            h = (2 ** (a + b + 1) / (2 * k + a + b + 1) * mpmath.gamma(k + a + 1) * mpmath.gamma(k + b + 1)
                 / (mpmath.gamma(k + a + b + 1) * mpmath.factorial(k)))
            mass = 2 ** (a + b + 1) * mpmath.beta(a + 1, b + 1)
            expected = float(mpmath.sqrt(mass / h))
        assert jacobi_norm_const(k, alpha, beta) == pytest.approx(expected, rel=1e-12)

    def test_invalid_parameters(self):
        with pytest.raises(ValueError):
            jacobi_norm_const(2, -1.0, 0.0)
        with pytest.raises(ValueError):
            OrthoFamily.jacobi(0.0, -1.5)

    @pytest.mark.parametrize("alpha,beta", [(0.0, 0.0), (1.5, 0.5), (-0.5, -0.5)])
    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_value_at_one_matches_rodrigues_scaling(self, alpha, beta, k):
        fam = OrthoFamily.jacobi(alpha, beta)
        classical = float(mpmath.jacobi(k, alpha, beta, 1))
        assert eval_poly(fam, k, 1.0) == pytest.approx(jacobi_norm_const(k, alpha, beta) * classical, rel=1e-12)
        assert fam.value_at_one(k) == pytest.approx(float(eval_poly(fam, k, 1.0)), rel=1e-12)


class TestPolynomials:
    def test_degree_zero(self):
        for fam in FAMILIES:
            np.testing.assert_array_equal(eval_poly(fam, 0, np.linspace(-1, 1, 5)), 1.0)

    def test_closed_forms(self):
        t = np.linspace(-2, 2, 9)
        np.testing.assert_allclose(eval_poly(OrthoFamily.hermite(), 2, t), (t**2 - 1) / math.sqrt(2), atol=1e-14)
        np.testing.assert_allclose(eval_poly(OrthoFamily.legendre(), 1, t), math.sqrt(3) * t, atol=1e-14)

    @pytest.mark.parametrize("fam", FAMILIES, ids=lambda f: f.name)
    def test_against_gram_schmidt(self, fam):
        K = 6
        C = _gram_schmidt(fam, K)
        t = np.linspace(-1, 1, 11)
        V = np.vander(t, K + 1, increasing=True)
        np.testing.assert_allclose(fam.eval_all(K, t), C @ V.T, atol=1e-8)

    @pytest.mark.parametrize("fam", FAMILIES, ids=lambda f: f.name)
    def test_gram_identity(self, fam):
        G = gram_matrix(fam, 10, 12)
        assert np.abs(G - np.eye(11)).max() < 1e-11


class TestGaussRules:
    def test_legendre_two_point(self):
        x, w = gauss_rule(OrthoFamily.legendre(), 2)
        np.testing.assert_allclose(np.sort(x), [-1 / math.sqrt(3), 1 / math.sqrt(3)], atol=1e-15)
        np.testing.assert_allclose(w, [0.5, 0.5], atol=1e-15)
        assert np.sum(w * x**2) == pytest.approx(1 / 3, abs=1e-15)

    def test_hermite_one_point(self):
        x, w = gauss_rule(OrthoFamily.hermite(), 1)
        assert x.tolist() == [0.0] and w.tolist() == [1.0]

    @given(st.sampled_from(FAMILIES), st.integers(1, 10))
    def test_exactness(self, fam, q):
        x, w = gauss_rule(fam, q)
        assert w.sum() == pytest.approx(1.0, abs=1e-14)
        for m in range(2 * q):
            scale = max(1.0, float(mpmath.sqrt(_moment(fam, 2 * m))))
            assert np.sum(w * x**m) == pytest.approx(float(_moment(fam, m)), abs=1e-11 * scale)

    @pytest.mark.parametrize("q", [1, 2, 5, 8])
    def test_hermite_symmetry(self, q):
        x, w = gauss_rule(OrthoFamily.hermite(), q)
        assert abs(np.sum(w * x ** (2 * q - 1))) < 1e-14 * np.sum(w * np.abs(x) ** (2 * q - 1)) + 1e-300
        if q >= 2:
            assert np.sum(w * x**2) == pytest.approx(1.0, abs=1e-13)

    def test_tensor_quadrature(self):
        tq = TensorQuadrature(OrthoFamily.legendre(), 3, 4)
        assert tq.count == 64
        assert tq.weights().sum() == pytest.approx(1.0, abs=1e-14)
        assert tq.points().shape == (64, 3)
        with pytest.raises(ValueError, match="nodes"):
            TensorQuadrature(OrthoFamily.legendre(), 7, 8)


class TestCoefficients:
    def test_parameter_independent_solution(self):
        model = AffineModel(ONE, [PiecewiseField.constant(0.0), PiecewiseField.constant(0.0)])
        space = FeSpace(16, 1)
        exp = compute_coeffs(model, space, box_index_set(2, 2), TensorQuadrature(OrthoFamily.legendre(), 2, 3))
        t0 = solve_dirichlet(space, 1.0, 1.0).coeffs
        np.testing.assert_allclose(exp.coeff(MultiIndex.zero()).coeffs, t0, atol=1e-15)
        assert np.abs(exp.coeffs[1:]).max() < 1e-15
        assert abs(parseval_check(exp).gap) < 1e-15

    @pytest.mark.parametrize("fam", [OrthoFamily.legendre(), OrthoFamily.chebyshev()], ids=lambda f: f.name)
    def test_single_parameter_scalar_oracle(self, fam):
        c = 0.5
        model = AffineModel(ONE, [PiecewiseField.constant(c)])
        space = FeSpace(32, 1)
        exp = compute_coeffs(model, space, box_index_set(1, 6), TensorQuadrature(fam, 1, 24))
        t0 = solve_dirichlet(space, 1.0, 1.0).coeffs
        a, b = fam.alpha, fam.beta
        # algebraic weight (1 + t)^b (1 - t)^a handled exactly by QUADPACK
        Z = integrate.quad(lambda t: 1.0, -1, 1, weight="alg", wvar=(b, a))[0]
        for k in range(7):
            g = lambda t: float(eval_poly(fam, k, t)) / (1 + c * t) / Z
            scalar = integrate.quad(g, -1, 1, weight="alg", wvar=(b, a), epsabs=1e-14, epsrel=1e-13)[0]
            np.testing.assert_allclose(exp.coeffs[exp.row[MultiIndex.unit(1, k)]], scalar * t0, atol=1e-8)

    def test_linear_load_hook(self):
        model = AffineModel(ONE, [PiecewiseField.constant(0.0)])
        space = FeSpace(16, 2)
        f0 = lambda x: np.ones_like(x)
        f1 = lambda x: np.sin(np.pi * x)
        load = lambda y: (lambda x: f0(x) + y[0] * f1(x))
        exp = compute_coeffs(model, space, box_index_set(1, 2), TensorQuadrature(OrthoFamily.legendre(), 1, 3), load=load)
        u1 = solve_dirichlet(space, 1.0, f1).coeffs
        np.testing.assert_allclose(exp.coeff(MultiIndex.unit(1)).coeffs, u1 / math.sqrt(3), atol=1e-14)
        assert np.abs(exp.coeff(MultiIndex.unit(1, 2)).coeffs).max() < 1e-14

    @given(st.floats(0.1, 5.0))
    def test_linear_in_load(self, lam):
        model = AffineModel(ONE, [PiecewiseField.hat(0, 0.5, 0.4, 4), PiecewiseField.hat(0.5, 0.5, 0.3, 4)])
        space = FeSpace(8, 1)
        quad = TensorQuadrature(OrthoFamily.legendre(), 2, 3)
        a = compute_coeffs(model, space, total_degree_set(2, 2), quad, 1.0)
        b = compute_coeffs(model, space, total_degree_set(2, 2), quad, lam)
        np.testing.assert_allclose(b.coeffs, lam * a.coeffs, rtol=1e-12, atol=1e-16)

    def test_precondition_errors(self):
        model = AffineModel(ONE, [PiecewiseField.constant(0.2)])
        space = FeSpace(8, 1)
        with pytest.raises(ValueError, match="2q - 1"):
            compute_coeffs(model, space, box_index_set(1, 4), TensorQuadrature(OrthoFamily.legendre(), 1, 2))
        with pytest.raises(ValueError, match="Jacobi"):
            compute_coeffs(model, space, box_index_set(1, 1), TensorQuadrature(OrthoFamily.hermite(), 1, 2))
        with pytest.raises(ValueError, match="parameters"):
            compute_coeffs(model, space, box_index_set(1, 1), TensorQuadrature(OrthoFamily.legendre(), 2, 2))
        logn = LognormalModel([PiecewiseField.constant(0.2)])
        with pytest.raises(ValueError, match="Hermite"):
            compute_coeffs(logn, space, box_index_set(1, 1), TensorQuadrature(OrthoFamily.legendre(), 1, 2))


class TestParsevalAndErrors:
    @pytest.fixture
    def two_param(self):
        model = AffineModel(ONE, [PiecewiseField.hat(0, 0.5, 0.5, 4), PiecewiseField.hat(0.5, 0.5, 0.4, 4)])
        return compute_coeffs(model, FeSpace(16, 1), box_index_set(2, 3), TensorQuadrature(OrthoFamily.legendre(), 2, 6))

    @given(st.sampled_from(FAMILIES[:4]), st.integers(0, 4), st.floats(0.05, 0.9))
    def test_bessel_inequality(self, fam, K, c):
        model = AffineModel(ONE, [PiecewiseField.constant(c)])
        exp = compute_coeffs(model, FeSpace(8, 1), box_index_set(1, K), TensorQuadrature(fam, 1, 6))
        assert parseval_check(exp).gap >= -1e-10

    def test_geometric_gap_decay(self):
        model = AffineModel(ONE, [PiecewiseField.constant(0.5)])
        gaps = []
        for K in range(1, 8):
            exp = compute_coeffs(model, FeSpace(8, 1), box_index_set(1, K), TensorQuadrature(OrthoFamily.legendre(), 1, 16))
            gaps.append(parseval_check(exp).gap)
        ratios = np.array(gaps[1:]) / np.array(gaps[:-1])
        assert np.all(gaps[-1] > 0) and np.all(ratios < 0.2)

    def test_full_and_empty_truncation(self, two_param):
        pv = parseval_check(two_param)
        assert l2_error_truncation(two_param, []) == pytest.approx(math.sqrt(pv.rhs), rel=1e-12)
        assert l2_error_truncation(two_param, two_param.indices) <= math.sqrt(max(pv.gap, 0)) + 1e-8

    def test_errors_nonincreasing_along_best_n(self, two_param):
        order = two_param.best_n(len(two_param))
        errs = [l2_error_truncation(two_param, order[:n]) for n in range(len(order) + 1)]
        assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))

    def test_mc_is_seeded_and_close(self, two_param):
        Lam = two_param.best_n(4)
        a = l2_error_truncation(two_param, Lam, method="mc", M=64, seed=5)
        b = l2_error_truncation(two_param, Lam, method="mc", M=64, seed=5)
        assert a == b
        assert a == pytest.approx(l2_error_truncation(two_param, Lam), rel=0.5)

    def test_csv_header(self, two_param, tmp_path):
        p = tmp_path / "c.csv"
        two_param.to_csv(p)
        first = p.read_text().splitlines()[0]
        assert first.startswith("# family=") and "legendre" in first

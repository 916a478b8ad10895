"""Orthonormal Jacobi and Hermite families, tensor Gauss rules and expansion coefficients.

Polynomials are evaluated with the orthonormal three-term recurrence

    sqrt(b_{k+1}) p_{k+1}(t) = (t - a_k) p_k(t) - sqrt(b_k) p_{k-1}(t),

where ``(a_k, b_k)`` are the monic recurrence coefficients of the probability
measure (``b_0 = 1``).  Gauss rules come from the eigen-decomposition of the
associated Jacobi matrix.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.linalg import eigh_tridiagonal
from scipy.special import gammaln

from .coeff_model import AffineModel, LognormalModel
from .fem import FeSpace, GridFunction, coefficient_at_gauss, energy_sq, norms_Ltau, solve_dirichlet
from .multiindex import DownwardClosedSet, MultiIndex

MAX_NODES = 10**6


def jacobi_norm_const(k: int, alpha: float, beta: float) -> float:
    """Factor ``c_k`` turning the classical Jacobi polynomial into the orthonormal one."""
    if alpha <= -1.0 or beta <= -1.0:
        raise ValueError("Jacobi parameters must exceed -1")
    if k < 0:
        raise ValueError("degree must be nonnegative")
    if k == 0:
        return 1.0
    ab = alpha + beta
    log_c2 = (math.log(2 * k + ab + 1) + gammaln(k + 1) + gammaln(k + ab + 1)
              + gammaln(alpha + 1) + gammaln(beta + 1)
              - gammaln(k + alpha + 1) - gammaln(k + beta + 1) - gammaln(ab + 2))
    return math.exp(0.5 * log_c2)


def jacobi_recurrence(K: int, alpha: float, beta: float) -> tuple[np.ndarray, np.ndarray]:
    """Monic coefficients ``a_0..a_K``, ``b_0..b_K`` of the Jacobi probability measure."""
    if alpha <= -1.0 or beta <= -1.0:
        raise ValueError("Jacobi parameters must exceed -1")
    ab = alpha + beta
    a = np.empty(K + 1)
    b = np.empty(K + 1)
    a[0] = (beta - alpha) / (ab + 2.0)
    b[0] = 1.0
    for k in range(1, K + 1):
        s = 2.0 * k + ab
        a[k] = (beta**2 - alpha**2) / (s * (s + 2.0))
        if k == 1:
            # reduced form; the general expression is 0/0 when alpha + beta = -1
            b[k] = 4.0 * (1 + alpha) * (1 + beta) / ((2 + ab) ** 2 * (3 + ab))
        else:
            b[k] = 4.0 * k * (k + alpha) * (k + beta) * (k + ab) / (s**2 * (s + 1.0) * (s - 1.0))
    return a, b


def hermite_recurrence(K: int) -> tuple[np.ndarray, np.ndarray]:
    b = np.arange(K + 1, dtype=float)
    b[0] = 1.0
    return np.zeros(K + 1), b


@dataclass(frozen=True)
class OrthoFamily:
    """Orthonormal polynomials for a Jacobi probability measure on [-1, 1] or the standard Gaussian."""

    kind: str
    alpha: float = 0.0
    beta: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("jacobi", "hermite"):
            raise ValueError("kind must be 'jacobi' or 'hermite'")
        if self.kind == "jacobi" and (self.alpha <= -1 or self.beta <= -1):
            raise ValueError("Jacobi parameters must exceed -1")

    @classmethod
    def jacobi(cls, alpha: float, beta: float) -> OrthoFamily:
        return cls("jacobi", float(alpha), float(beta))

    @classmethod
    def legendre(cls) -> OrthoFamily:
        return cls("jacobi", 0.0, 0.0)

    @classmethod
    def chebyshev(cls) -> OrthoFamily:
        return cls("jacobi", -0.5, -0.5)

    @classmethod
    def hermite(cls) -> OrthoFamily:
        return cls("hermite")

    @property
    def name(self) -> str:
        if self.kind == "hermite":
            return "hermite"
        if self.alpha == self.beta == 0.0:
            return "legendre"
        return f"jacobi({self.alpha:g},{self.beta:g})"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "name": self.name, "alpha": self.alpha, "beta": self.beta}

    @property
    def symmetric(self) -> bool:
        return self.kind == "hermite" or self.alpha == self.beta

    def recurrence(self, K: int) -> tuple[np.ndarray, np.ndarray]:
        if self.kind == "hermite":
            return hermite_recurrence(K)
        return jacobi_recurrence(K, self.alpha, self.beta)

    def eval_all(self, K: int, t) -> np.ndarray:
        """Values of degrees ``0..K`` at ``t``; shape ``(K + 1, *t.shape)``."""
        t = np.asarray(t, dtype=float)
        a, b = self.recurrence(K + 1)
        sb = np.sqrt(b)
        out = np.empty((K + 1,) + t.shape)
        out[0] = 1.0
        if K >= 1:
            out[1] = (t - a[0]) * out[0] / sb[1]
        for k in range(1, K):
            out[k + 1] = ((t - a[k]) * out[k] - sb[k] * out[k - 1]) / sb[k + 1]
        return out

    def eval(self, k: int, t) -> np.ndarray:
        return self.eval_all(k, t)[k]

    def gauss_rule(self, q: int) -> tuple[np.ndarray, np.ndarray]:
        """``q``-point Gauss rule for the family's probability measure."""
        if q < 1:
            raise ValueError("need at least one node")
        a, b = self.recurrence(q)
        if q == 1:
            return np.array([a[0]]), np.array([1.0])
        nodes, vecs = eigh_tridiagonal(a[:q], np.sqrt(b[1:q]))
        w = b[0] * vecs[0] ** 2
        w = w / w.sum()
        if self.symmetric:
            # enforce exact mirror symmetry so odd moments cancel pairwise
            nodes = 0.5 * (nodes - nodes[::-1])
            w = 0.5 * (w + w[::-1])
        return nodes, w

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        if self.kind == "hermite":
            return rng.standard_normal(size)
        return 2.0 * rng.beta(self.beta + 1.0, self.alpha + 1.0, size) - 1.0

    def value_at_one(self, k: int) -> float:
        """Closed-form ``J_k(1) = c_k (k+alpha choose k)`` for Jacobi families."""
        if self.kind != "jacobi":
            raise ValueError("only defined for Jacobi families")
        log_binom = gammaln(k + self.alpha + 1) - gammaln(k + 1) - gammaln(self.alpha + 1)
        return jacobi_norm_const(k, self.alpha, self.beta) * math.exp(log_binom)


def eval_poly(family: OrthoFamily, k: int, t) -> np.ndarray:
    return family.eval(k, t)


def gauss_rule(family: OrthoFamily, q: int) -> tuple[np.ndarray, np.ndarray]:
    return family.gauss_rule(q)


def gram_matrix(family: OrthoFamily, K: int, q: int) -> np.ndarray:
    x, w = family.gauss_rule(q)
    P = family.eval_all(K, x)
    return (P * w) @ P.T


class TensorQuadrature:
    """Full tensor product of a ``q``-point Gauss rule in ``d`` dimensions."""

    def __init__(self, family: OrthoFamily, d: int, q: int) -> None:
        if d < 0 or q < 1:
            raise ValueError("need d >= 0 and q >= 1")
        if d * math.log(q) > math.log(MAX_NODES):
            raise ValueError(f"{q}^{d} tensor nodes exceed the limit of {MAX_NODES}")
        self.family = family
        self.d = d
        self.q = q
        self.nodes_1d, self.weights_1d = family.gauss_rule(q)

    @property
    def count(self) -> int:
        return self.q**self.d

    def node_indices(self) -> np.ndarray:
        """Per-node 1D index in every dimension, last dimension fastest."""
        if self.d == 0:
            return np.zeros((1, 0), dtype=np.int64)
        grids = np.meshgrid(*[np.arange(self.q)] * self.d, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def points(self) -> np.ndarray:
        return self.nodes_1d[self.node_indices()]

    def weights(self) -> np.ndarray:
        idx = self.node_indices()
        return np.prod(self.weights_1d[idx], axis=1) if self.d else np.ones(1)

    def basis_matrix(self, indices: Sequence[MultiIndex]) -> np.ndarray:
        """``J_nu(y_node)`` with shape ``(len(indices), count)``."""
        K = max((nu.max_exponent for nu in indices), default=0)
        table = self.family.eval_all(K, self.nodes_1d)
        idx = self.node_indices()
        out = np.ones((len(indices), self.count))
        for i, nu in enumerate(indices):
            for j, k in nu:
                out[i] *= table[k, idx[:, j - 1]]
        return out

    def to_dict(self) -> dict:
        return {"family": self.family.to_dict(), "d": self.d, "q": self.q}


def _check_family(model, family: OrthoFamily) -> None:
    if isinstance(model, AffineModel) and family.kind != "jacobi":
        raise ValueError("affine models take a Jacobi family")
    if isinstance(model, LognormalModel) and family.kind != "hermite":
        raise ValueError("lognormal models take the Hermite family")


def node_solution(model, space: FeSpace, y: np.ndarray, f=1.0, with_laplacian: bool = False):
    """Galerkin solution at ``y`` and optionally its strong-form Laplacian at the Gauss points."""
    aq = model.evaluate(y, space.gauss_x)
    u = solve_dirichlet(space, aq, f, check_residual=False)
    if not with_laplacian:
        return u.coeffs, None
    da = model.gradient(y, space.gauss_x)
    du = u.grad_at_gauss()
    fq = coefficient_at_gauss(space, f)
    return u.coeffs, (-(fq + da * du) / aq).ravel()


@dataclass
class OrthoExpansion:
    family: OrthoFamily
    model: object
    space: FeSpace
    quad: TensorQuadrature
    indices: list[MultiIndex]
    coeffs: np.ndarray
    node_solutions: np.ndarray
    node_laplacians: np.ndarray | None = None
    laplacians: np.ndarray | None = None
    norms_V: np.ndarray = field(init=False)
    norms_W: np.ndarray | None = field(init=False, default=None)

    def __post_init__(self) -> None:
        self.row = {nu: i for i, nu in enumerate(self.indices)}
        self.norms_V = np.sqrt(energy_sq(self.space, self.coeffs))
        if self.laplacians is not None:
            self.norms_W = norms_Ltau(self.space, self.laplacians, 2.0)

    def __len__(self) -> int:
        return len(self.indices)

    def coeff(self, nu: MultiIndex) -> GridFunction:
        return GridFunction(self.space, self.coeffs[self.row[nu]])

    def metric(self, which: str) -> np.ndarray:
        if which == "V":
            return self.norms_V
        if which == "W":
            if self.norms_W is None:
                raise RuntimeError("expansion was computed without Laplacians")
            return self.norms_W
        raise ValueError("metric must be 'V' or 'W'")

    def best_n(self, n: int, metric: str = "V") -> list[MultiIndex]:
        vals = self.metric(metric)
        order = sorted(range(len(self)), key=lambda i: (-vals[i], self.indices[i].sort_key()))
        return [self.indices[i] for i in order[: max(n, 0)]]

    def evaluate(self, Lambda: Iterable[MultiIndex], y: np.ndarray) -> np.ndarray:
        """``sum_{nu in Lambda} v_nu J_nu(y)`` for parameter rows ``y``; returns coefficient rows."""
        Lambda = list(Lambda)
        y = np.atleast_2d(np.asarray(y, dtype=float))
        if not Lambda:
            return np.zeros((y.shape[0], self.space.ndof))
        K = max(nu.max_exponent for nu in Lambda)
        table = self.family.eval_all(K, y)  # (K+1, m, d)
        Phi = np.ones((len(Lambda), y.shape[0]))
        for i, nu in enumerate(Lambda):
            for j, k in nu:
                Phi[i] *= table[k, :, j - 1]
        rows = np.array([self.row[nu] for nu in Lambda])
        return Phi.T @ self.coeffs[rows]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# family={json.dumps(self.family.to_dict())} d={self.quad.d} q={self.quad.q}\n")
            w = csv.writer(fh)
            w.writerow(["nu", "degree", "norm_V", "norm_W"])
            for i, nu in enumerate(self.indices):
                nw = "" if self.norms_W is None else repr(float(self.norms_W[i]))
                w.writerow([json.dumps(nu.to_json()), nu.degree, repr(float(self.norms_V[i])), nw])


def compute_coeffs(model, space: FeSpace, index_set: Iterable[MultiIndex], quad: TensorQuadrature,
                   f=1.0, load: Callable[[np.ndarray], object] | None = None,
                   with_laplacians: bool = False) -> OrthoExpansion:
    """Coefficients ``v_nu = sum_nodes w J_nu(y) u_h(y)`` with one solve per tensor node.

    ``load`` maps a parameter vector to a load (number, callable or Gauss array)
    and overrides ``f``; it allows parameter-dependent right-hand sides.
    """
    _check_family(model, quad.family)
    if model.dims != quad.d:
        raise ValueError(f"model has {model.dims} parameters but quadrature has {quad.d} dimensions")
    indices = index_set.sorted() if isinstance(index_set, DownwardClosedSet) else list(index_set)
    for nu in indices:
        if nu.max_dim > quad.d:
            raise ValueError(f"{nu!r} uses a dimension beyond the quadrature")
        if nu.max_exponent > 2 * quad.q - 1:
            raise ValueError(f"{nu!r} has a degree above 2q - 1 = {2 * quad.q - 1}")
    Y = quad.points()
    U = np.empty((len(Y), space.ndof))
    L = np.empty((len(Y), space.n_el * 3)) if with_laplacians else None
    for i, y in enumerate(Y):
        fy = load(y) if load is not None else f
        U[i], lap = node_solution(model, space, y, fy, with_laplacians)
        if L is not None:
            L[i] = lap
    W = quad.basis_matrix(indices) * quad.weights()
    coeffs = W @ U
    lap_coeffs = None if L is None else W @ L
    return OrthoExpansion(quad.family, model, space, quad, indices, coeffs, U, L, lap_coeffs)


@dataclass(frozen=True)
class ParsevalResult:
    lhs: float
    rhs: float

    @property
    def gap(self) -> float:
        return self.rhs - self.lhs


def parseval_check(exp: OrthoExpansion) -> ParsevalResult:
    """``sum ||v_nu||_V^2`` against the quadrature value of ``int ||u_h(y)||_V^2``."""
    lhs = float(np.sum(exp.norms_V**2))
    rhs = float(exp.quad.weights() @ energy_sq(exp.space, exp.node_solutions))
    return ParsevalResult(lhs, rhs)


def l2_error_truncation(exp: OrthoExpansion, Lambda: Iterable[MultiIndex], method: str = "quadrature",
                        M: int = 256, seed: int | None = 0, f=1.0) -> float:
    """Root mean square V error of the truncated series.

    ``method="quadrature"`` reuses the tensor nodes; ``"mc"`` draws ``M``
    seeded samples from the family's measure and solves afresh.
    """
    Lambda = list(Lambda)
    if method == "quadrature":
        approx = exp.evaluate(Lambda, exp.quad.points())
        err = energy_sq(exp.space, exp.node_solutions - approx)
        return math.sqrt(max(float(exp.quad.weights() @ err), 0.0))
    if method == "mc":
        rng = np.random.default_rng(seed)
        Y = exp.family.sample(rng, (M, exp.quad.d))
        U = np.stack([node_solution(exp.model, exp.space, y, f)[0] for y in Y])
        err = energy_sq(exp.space, U - exp.evaluate(Lambda, Y))
        return math.sqrt(float(np.mean(err)))
    raise ValueError("method must be 'quadrature' or 'mc'")

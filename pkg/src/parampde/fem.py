"""Conforming P1/P2 finite elements on (0, 1) with homogeneous Dirichlet conditions.

Every integral uses the same three-point Gauss rule per element, which is
exact for the P2-gradient times piecewise-linear-coefficient products met in
assembly.  Systems are solved with a banded Cholesky factorization.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .fitting import fit_rate

_GAUSS_S = np.array([0.5 - 0.5 * np.sqrt(0.6), 0.5, 0.5 + 0.5 * np.sqrt(0.6)])
_GAUSS_W = np.array([5.0, 8.0, 5.0]) / 18.0


class SingularSystemError(RuntimeError):
    pass


def _local_basis(degree: int, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reference shape functions and their s-derivatives at points ``s`` in [0, 1]."""
    s = np.asarray(s, dtype=float)
    if degree == 1:
        N = np.stack([1.0 - s, s], axis=-1)
        dN = np.stack([-np.ones_like(s), np.ones_like(s)], axis=-1)
    elif degree == 2:
        N = np.stack([2.0 * (s - 0.5) * (s - 1.0), -4.0 * s * (s - 1.0), 2.0 * s * (s - 0.5)], axis=-1)
        dN = np.stack([4.0 * s - 3.0, 4.0 - 8.0 * s, 4.0 * s - 1.0], axis=-1)
    else:
        raise ValueError("only P1 and P2 elements are supported")
    return N, dN


class FeSpace:
    """Uniform mesh of ``n_el`` elements with Lagrange elements of degree 1 or 2."""

    def __init__(self, n_el: int, degree: int = 1) -> None:
        if degree not in (1, 2):
            raise ValueError("degree must be 1 or 2")
        if n_el < 1:
            raise ValueError("need at least one element")
        self.n_el = int(n_el)
        self.degree = int(degree)
        self.h = 1.0 / self.n_el
        self.n_nodes = self.degree * self.n_el + 1
        self.ndof = self.n_nodes - 2
        if self.ndof < 1:
            raise ValueError(f"P{degree} with {n_el} element(s) has no interior degrees of freedom")
        left = np.arange(self.n_el) * self.h
        self.gauss_x = left[:, None] + self.h * _GAUSS_S[None, :]
        self.gauss_w = np.broadcast_to(self.h * _GAUSS_W, (self.n_el, 3)).copy()
        self.elem_nodes = self.degree * np.arange(self.n_el)[:, None] + np.arange(self.degree + 1)[None, :]
        self._N, dN = _local_basis(self.degree, _GAUSS_S)
        self._dN = dN / self.h

    def __repr__(self) -> str:
        return f"FeSpace(n_el={self.n_el}, degree={self.degree}, ndof={self.ndof})"

    def __eq__(self, other: object) -> bool:
        return isinstance(other, FeSpace) and (self.n_el, self.degree) == (other.n_el, other.degree)

    def __hash__(self) -> int:
        return hash((self.n_el, self.degree))

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_nodes)

    @property
    def dof_nodes(self) -> np.ndarray:
        return self.nodes[1:-1]

    def _eval_matrix(self, x: np.ndarray, deriv: bool) -> sp.csr_matrix:
        x = np.asarray(x, dtype=float).ravel()
        el = np.clip(np.floor(x * self.n_el).astype(np.int64), 0, self.n_el - 1)
        s = x * self.n_el - el
        N, dN = _local_basis(self.degree, s)
        vals = dN / self.h if deriv else N
        cols = self.elem_nodes[el] - 1
        rows = np.repeat(np.arange(x.size), self.degree + 1)
        vals = vals.ravel()
        cols = cols.ravel()
        keep = (cols >= 0) & (cols < self.ndof)
        return sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(x.size, self.ndof))

    def value_matrix(self, x: np.ndarray) -> sp.csr_matrix:
        """Sparse map from dof coefficients to function values at points ``x``."""
        return self._eval_matrix(x, deriv=False)

    def derivative_matrix(self, x: np.ndarray) -> sp.csr_matrix:
        return self._eval_matrix(x, deriv=True)

    @cached_property
    def value_op(self) -> sp.csr_matrix:
        """Coefficients -> values at all Gauss points (row-major over elements)."""
        return self._build_gauss_op(self._N)

    @cached_property
    def grad_op(self) -> sp.csr_matrix:
        """Coefficients -> derivatives at all Gauss points."""
        return self._build_gauss_op(self._dN)

    def _build_gauss_op(self, table: np.ndarray) -> sp.csr_matrix:
        nq = 3
        rows = np.repeat(np.arange(self.n_el * nq), self.degree + 1)
        cols = np.repeat(self.elem_nodes[:, None, :], nq, axis=1).reshape(-1) - 1
        vals = np.broadcast_to(table[None, :, :], (self.n_el, nq, self.degree + 1)).reshape(-1)
        keep = (cols >= 0) & (cols < self.ndof)
        return sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(self.n_el * nq, self.ndof))

    @cached_property
    def laplace_factor(self) -> np.ndarray:
        """Banded Cholesky factor of the ``a = 1`` stiffness matrix."""
        return sla.cholesky_banded(banded_stiffness(self, np.ones((self.n_el, 3))))

    @cached_property
    def laplace_matrix(self) -> sp.csr_matrix:
        return assemble_stiffness(self, 1.0)

    def nested_in(self, fine: FeSpace) -> bool:
        return self.degree <= fine.degree and fine.n_el % self.n_el == 0


@dataclass
class GridFunction:
    space: FeSpace
    coeffs: np.ndarray

    def __post_init__(self) -> None:
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.shape != (self.space.ndof,):
            raise ValueError(f"expected {self.space.ndof} coefficients, got {self.coeffs.shape}")
        if not np.all(np.isfinite(self.coeffs)):
            raise ValueError("non-finite coefficients")

    @classmethod
    def zero(cls, space: FeSpace) -> GridFunction:
        return cls(space, np.zeros(space.ndof))

    @classmethod
    def interpolate(cls, space: FeSpace, f: Callable[[np.ndarray], np.ndarray]) -> GridFunction:
        return cls(space, np.asarray(f(space.dof_nodes), dtype=float))

    def nodal(self) -> np.ndarray:
        """Values at all mesh nodes, boundary zeros included."""
        return np.concatenate([[0.0], self.coeffs, [0.0]])

    def at_gauss(self) -> np.ndarray:
        return (self.space.value_op @ self.coeffs).reshape(self.space.n_el, 3)

    def grad_at_gauss(self) -> np.ndarray:
        return (self.space.grad_op @ self.coeffs).reshape(self.space.n_el, 3)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.space.value_matrix(x) @ self.coeffs

    def _check(self, other: GridFunction) -> None:
        if other.space != self.space:
            raise ValueError("grid functions live in different spaces")

    def __add__(self, other: GridFunction) -> GridFunction:
        self._check(other)
        return GridFunction(self.space, self.coeffs + other.coeffs)

    def __sub__(self, other: GridFunction) -> GridFunction:
        self._check(other)
        return GridFunction(self.space, self.coeffs - other.coeffs)

    def __mul__(self, c: float) -> GridFunction:
        return GridFunction(self.space, c * self.coeffs)

    __rmul__ = __mul__

    def __neg__(self) -> GridFunction:
        return GridFunction(self.space, -self.coeffs)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "value"])
            for x, v in zip(self.space.nodes, self.nodal()):
                w.writerow([repr(float(x)), repr(float(v))])


@dataclass
class ElementField:
    """An L2 function sampled at the three Gauss points of every element."""

    space: FeSpace
    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float).reshape(self.space.n_el, 3)

    def __mul__(self, c: float) -> ElementField:
        return ElementField(self.space, c * self.values)

    __rmul__ = __mul__


def coefficient_at_gauss(space: FeSpace, a) -> np.ndarray:
    """Sample a coefficient (number, callable, field, or Gauss-point array) at the Gauss points."""
    if isinstance(a, (int, float)):
        return np.full((space.n_el, 3), float(a))
    if isinstance(a, np.ndarray):
        return np.asarray(a, dtype=float).reshape(space.n_el, 3)
    return np.asarray(a(space.gauss_x), dtype=float).reshape(space.n_el, 3)


def _check_positive(aq: np.ndarray) -> None:
    bad = np.nonzero(~(aq > 0.0))
    if bad[0].size:
        raise ValueError(f"coefficient is not positive in element {int(bad[0][0])} "
                         f"(value {aq[bad][0]:.3g})")


def _element_matrices(space: FeSpace, aq: np.ndarray) -> np.ndarray:
    wa = space.gauss_w * aq
    return np.einsum("eq,qa,qb->eab", wa, space._dN, space._dN)


def banded_stiffness(space: FeSpace, aq: np.ndarray) -> np.ndarray:
    """Upper banded storage (``scipy.linalg`` convention) of the interior stiffness matrix."""
    u = space.degree
    Ke = _element_matrices(space, aq)
    ab = np.zeros((u + 1, space.n_nodes))
    g = space.elem_nodes
    for a in range(u + 1):
        for b in range(a, u + 1):
            ab[u + a - b, g[:, b]] += Ke[:, a, b]
    ab = ab[:, 1:-1].copy()
    for r in range(u):
        ab[r, : u - r] = 0.0
    return ab


def assemble_stiffness(space: FeSpace, a) -> sp.csr_matrix:
    """Sparse symmetric stiffness matrix of ``int a u' v'`` on the interior dofs."""
    aq = coefficient_at_gauss(space, a)
    _check_positive(aq)
    ab = banded_stiffness(space, aq)
    u = space.degree
    n = space.ndof
    diags = [ab[u]]
    offsets = [0]
    for k in range(1, min(u, n - 1) + 1):
        diags += [ab[u - k, k:], ab[u - k, k:]]
        offsets += [k, -k]
    return sp.diags(diags, offsets, shape=(n, n), format="csr")


def load_vector(space: FeSpace, f) -> np.ndarray:
    """``int f v`` for every basis function ``v``; ``f`` a number, callable or Gauss array."""
    fq = coefficient_at_gauss(space, f)
    return space.value_op.T @ (space.gauss_w * fq).ravel()


def flux_load(space: FeSpace, flux_q: np.ndarray) -> np.ndarray:
    """``int g v'`` for a Gauss-point sampled flux ``g`` (shape ``(..., n_el, 3)``)."""
    flux_q = np.asarray(flux_q)
    lead = flux_q.shape[:-2]
    wf = (flux_q * space.gauss_w).reshape(*lead, -1)
    return (space.grad_op.T @ wf.reshape(-1, space.n_el * 3).T).T.reshape(*lead, space.ndof)


def factorize(space: FeSpace, a) -> np.ndarray:
    aq = coefficient_at_gauss(space, a)
    _check_positive(aq)
    try:
        return sla.cholesky_banded(banded_stiffness(space, aq))
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(str(exc)) from exc


def cho_solve(factor: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve with a banded Cholesky factor; ``rhs`` is ``(ndof,)`` or ``(m, ndof)``."""
    rhs = np.asarray(rhs, dtype=float)
    if rhs.ndim == 1:
        return sla.cho_solve_banded((factor, False), rhs)
    return sla.cho_solve_banded((factor, False), rhs.T).T


def solve_dirichlet(space: FeSpace, a, f=1.0, rhs: np.ndarray | None = None,
                    check_residual: bool = True) -> GridFunction:
    """Galerkin solution of ``-(a u')' = f``, ``u(0) = u(1) = 0``.

    ``rhs`` overrides the load vector built from ``f``.
    """
    aq = coefficient_at_gauss(space, a)
    _check_positive(aq)
    ab = banded_stiffness(space, aq)
    b = load_vector(space, f) if rhs is None else np.asarray(rhs, dtype=float)
    try:
        x = sla.solveh_banded(ab, b)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(str(exc)) from exc
    if check_residual:
        K = assemble_stiffness(space, aq)
        r = K @ x - b
        scale = sp.linalg.norm(K, ord=np.inf) * np.abs(x).max() + np.abs(b).max()
        if scale > 0 and np.abs(r).max() > 1e-12 * scale:
            raise SingularSystemError(f"relative residual {np.abs(r).max() / scale:.2e} too large")
    return GridFunction(space, x)


def energy_sq(space: FeSpace, coeffs: np.ndarray) -> np.ndarray:
    """Squared V norms ``||u'||^2`` of one or many coefficient vectors (rows)."""
    G = space.grad_op
    c = np.atleast_2d(coeffs)
    d = (G @ c.T).T.reshape(c.shape[0], space.n_el, 3)
    out = np.einsum("meq,eq->m", d * d, space.gauss_w)
    return out if np.ndim(coeffs) > 1 else out[0]


def norm_V(u: GridFunction) -> float:
    """``||u'||_{L2}``."""
    return float(np.sqrt(energy_sq(u.space, u.coeffs)))


def norm_Ltau(field: ElementField, tau: float = 2.0) -> float:
    """``(int |g|^tau)^(1/tau)`` with the element Gauss rule."""
    if tau < 1.0:
        raise ValueError("tau must be >= 1")
    s = float(np.sum(field.space.gauss_w * np.abs(field.values) ** tau))
    return s ** (1.0 / tau)


def norm_L2(field: ElementField) -> float:
    return float(np.sqrt(np.sum(field.space.gauss_w * field.values**2)))


def norms_Ltau(space: FeSpace, values: np.ndarray, tau: float) -> np.ndarray:
    """Row-wise ``L^tau`` norms of Gauss-point samples of shape ``(m, n_el*3)``."""
    w = space.gauss_w.ravel()
    return (np.abs(values) ** tau @ w) ** (1.0 / tau)


def _cross_grad(fine: FeSpace, coarse: FeSpace) -> sp.csr_matrix:
    if not coarse.nested_in(fine):
        raise ValueError(f"{coarse} is not nested in {fine}")
    return coarse.derivative_matrix(fine.gauss_x.ravel())


def project_coeffs(coeffs: np.ndarray, fine: FeSpace, coarse: FeSpace) -> np.ndarray:
    """V-orthogonal projection (``a = 1`` energy) of fine coefficient rows onto ``coarse``."""
    if coarse == fine:
        return np.array(coeffs, dtype=float, copy=True)
    Gc = _cross_grad(fine, coarse)
    c = np.atleast_2d(coeffs)
    d = (fine.grad_op @ c.T) * fine.gauss_w.ravel()[:, None]
    rhs = (Gc.T @ d).T
    out = cho_solve(coarse.laplace_factor, rhs)
    return out if np.ndim(coeffs) > 1 else out[0]


def projection_error_sq(coeffs: np.ndarray, fine: FeSpace, coarse: FeSpace,
                        projected: np.ndarray | None = None) -> np.ndarray:
    """``||u - P u||_V^2`` for fine coefficient rows, integrated on the fine mesh."""
    c = np.atleast_2d(coeffs)
    if projected is None:
        projected = project_coeffs(c, fine, coarse)
    p = np.atleast_2d(projected)
    Gc = _cross_grad(fine, coarse)
    diff = (fine.grad_op @ c.T) - (Gc @ p.T)
    out = (diff * diff * fine.gauss_w.ravel()[:, None]).sum(axis=0)
    return out if np.ndim(coeffs) > 1 else out[0]


def project(u: GridFunction, coarse: FeSpace) -> GridFunction:
    return GridFunction(coarse, project_coeffs(u.coeffs, u.space, coarse))


def dyadic_space(max_dofs: int, degree: int, fine: FeSpace) -> FeSpace:
    """Largest uniform space nested in ``fine`` with at most ``max_dofs`` dofs (at least one)."""
    n_el = 1 if degree == 2 else 2
    while True:
        nxt = 2 * n_el
        if nxt > fine.n_el or fine.n_el % nxt or degree * nxt - 1 > max_dofs:
            break
        n_el = nxt
    if fine.n_el % n_el:
        raise ValueError(f"no {degree=} space with {max_dofs} dofs nested in {fine}")
    return FeSpace(n_el, degree)


class HierarchicalBasis:
    """Dyadic hierarchical hat basis for P1 functions on ``2^levels`` elements.

    Level ``l`` hats are centred at odd multiples of ``2^{-(l+1)}`` with half
    width ``2^{-(l+1)}``.  With ``a = 1`` distinct hats are V-orthogonal, and a
    level-``l`` hat has squared V norm ``2^{l+2}``.
    """

    def __init__(self, levels: int) -> None:
        if levels < 1:
            raise ValueError("need at least one level")
        self.levels = int(levels)
        self.space = FeSpace(2**levels, 1)
        i = np.arange(1, 2**levels)
        tz = np.zeros_like(i)
        k = i.copy()
        while np.any(k % 2 == 0):
            even = k % 2 == 0
            tz[even] += 1
            k[even] //= 2
        self.level = self.levels - 1 - tz
        self.position = (k - 1) // 2
        self.half_width = 2.0 ** -(self.level + 1)
        self.energy_scale = np.sqrt(2.0 / self.half_width)
        self._step = (2**tz).astype(np.int64)
        self._by_level = [np.nonzero(self.level == l)[0] for l in range(self.levels)]

    @property
    def size(self) -> int:
        return self.space.ndof

    def to_hierarchical(self, nodal: np.ndarray) -> np.ndarray:
        """Interior nodal values (rows) -> hierarchical coefficients."""
        u = np.atleast_2d(nodal)
        full = np.pad(u, ((0, 0), (1, 1)))
        idx = np.arange(1, 2**self.levels)
        c = full[:, idx] - 0.5 * (full[:, idx - self._step] + full[:, idx + self._step])
        return c if np.ndim(nodal) > 1 else c[0]

    def to_nodal(self, coeffs: np.ndarray) -> np.ndarray:
        c = np.atleast_2d(coeffs)
        full = np.zeros((c.shape[0], 2**self.levels + 1))
        for l in range(self.levels):
            pos = self._by_level[l]
            idx = pos + 1
            st = self._step[pos]
            full[:, idx] = c[:, pos] + 0.5 * (full[:, idx - st] + full[:, idx + st])
        out = full[:, 1:-1]
        return out if np.ndim(coeffs) > 1 else out[0]

    def energy_coefficients(self, nodal: np.ndarray) -> np.ndarray:
        """Hierarchical coefficients scaled by the V norms of their hats."""
        return self.to_hierarchical(nodal) * self.energy_scale

    def stiffness(self) -> np.ndarray:
        """Dense ``a = 1`` stiffness matrix in the hierarchical basis (small sizes only)."""
        T = self.to_nodal(np.eye(self.size))  # row i: nodal values of hat i
        K = self.space.laplace_matrix
        return T @ (K @ T.T)

    def selection_order(self, nodal: np.ndarray) -> np.ndarray:
        e = np.abs(self.energy_coefficients(nodal))
        return np.lexsort((self.position, self.level, -e))


def best_nterm_spatial(u: GridFunction, basis: HierarchicalBasis, n: int) -> GridFunction:
    """Keep the ``n`` hierarchical terms with largest V-norm contribution."""
    if u.space != basis.space:
        raise ValueError("grid function must live on the hierarchical basis' P1 mesh")
    if n >= basis.size:
        return GridFunction(u.space, u.coeffs.copy())
    c = basis.to_hierarchical(u.coeffs)
    keep = basis.selection_order(u.coeffs)[: max(n, 0)]
    out = np.zeros_like(c)
    out[keep] = c[keep]
    return GridFunction(u.space, basis.to_nodal(out))


def measure_spatial_rate(errors: Iterable[Sequence[float]]) -> float:
    """Negated log-log least-squares slope of ``(n, e)`` pairs."""
    n, e = np.asarray(list(errors), dtype=float).T
    return fit_rate(n, e).rate

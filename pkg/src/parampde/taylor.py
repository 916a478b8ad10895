"""Taylor coefficients of the discrete affine solution map and their diagnostics.

Coefficients are computed layer by layer from the recursion

    int abar t_nu' v' = - sum_{j in supp nu} int psi_j t_{nu - e_j}' v',

which only ever needs the factorization of the ``abar`` stiffness matrix.
Laplacians come from the strong form of the same recursion sampled at the
Gauss points.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .coeff_model import AffineModel
from .fem import (ElementField, FeSpace, GridFunction, cho_solve, coefficient_at_gauss, energy_sq,
                  factorize, flux_load, load_vector, norms_Ltau, solve_dirichlet)
from .multiindex import DownwardClosedSet, MultiIndex, WeightSequence, layer_size, weight_power

_METRICS = ("V", "W", "B")


@dataclass(frozen=True)
class TaylorRecord:
    nu: MultiIndex
    coeff: GridFunction
    laplacian: ElementField | None
    norm_V: float
    norm_W: float | None


class TaylorExpansion:
    """Coefficients ``t_nu`` stored row-wise in layer order."""

    def __init__(self, model: AffineModel, space: FeSpace, index_set: DownwardClosedSet,
                 f, indices: list[MultiIndex], coeffs: np.ndarray) -> None:
        self.model = model
        self.space = space
        self.index_set = index_set
        self.f = f
        self.indices = indices
        self.row = {nu: i for i, nu in enumerate(indices)}
        self.coeffs = coeffs
        self.degrees = np.array([nu.degree for nu in indices])
        self.norms_V = np.sqrt(energy_sq(space, coeffs))
        self.laplacians: np.ndarray | None = None
        self.norms_W: np.ndarray | None = None
        self._ltau_cache: dict[float, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.indices)

    def __contains__(self, nu: object) -> bool:
        return nu in self.row

    @property
    def max_degree(self) -> int:
        return int(self.degrees.max())

    def coeff(self, nu: MultiIndex) -> GridFunction:
        return GridFunction(self.space, self.coeffs[self.row[nu]])

    def record(self, nu: MultiIndex) -> TaylorRecord:
        i = self.row[nu]
        lap = None if self.laplacians is None else ElementField(self.space, self.laplacians[i])
        nw = None if self.norms_W is None else float(self.norms_W[i])
        return TaylorRecord(nu, self.coeff(nu), lap, float(self.norms_V[i]), nw)

    def layer_complete(self, n: int) -> bool:
        return int(np.sum(self.degrees == n)) == layer_size(self.model.dims, n)

    def norms_Ltau(self, tau: float) -> np.ndarray:
        """``||Delta t_nu||_{L^tau}`` for every stored index."""
        if self.laplacians is None:
            raise RuntimeError("call compute_laplacians first")
        if tau not in self._ltau_cache:
            self._ltau_cache[tau] = norms_Ltau(self.space, self.laplacians, tau)
        return self._ltau_cache[tau]

    def metric(self, which: str) -> np.ndarray:
        if which == "V":
            return self.norms_V
        if which == "W":
            if self.norms_W is None:
                raise RuntimeError("call compute_laplacians first")
            return self.norms_W
        if which == "B":
            return self.norms_V + self.norms_Ltau(2.0)
        raise ValueError(f"metric must be one of {_METRICS}")

    def weights(self, rho: WeightSequence | None) -> np.ndarray:
        if rho is None:
            return np.ones(len(self.indices))
        return np.array([weight_power(rho, nu) for nu in self.indices])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["nu", "degree", "norm_V", "norm_W"])
            for i, nu in enumerate(self.indices):
                nw = "" if self.norms_W is None else repr(float(self.norms_W[i]))
                w.writerow([json.dumps(nu.to_json()), nu.degree, repr(float(self.norms_V[i])), nw])


def _layers(index_set: Iterable[MultiIndex]) -> list[list[MultiIndex]]:
    by_deg: dict[int, list[MultiIndex]] = {}
    for nu in index_set:
        by_deg.setdefault(nu.degree, []).append(nu)
    top = max(by_deg)
    return [sorted(by_deg.get(n, []), key=MultiIndex.sort_key) for n in range(top + 1)]


def _parent_slots(members: Sequence[MultiIndex], row: dict[MultiIndex, int]):
    """Per support slot: (member positions, dimension j, row of nu - e_j)."""
    slots: list[tuple[list[int], list[int], list[int]]] = []
    for i, nu in enumerate(members):
        for k, j in enumerate(nu.support):
            if k == len(slots):
                slots.append(([], [], []))
            parent = nu.sub(j)
            if parent not in row:
                raise RuntimeError(f"ancestor {parent!r} of {nu!r} missing")
            slots[k][0].append(i)
            slots[k][1].append(j - 1)
            slots[k][2].append(row[parent])
    return [tuple(np.asarray(a, dtype=np.int64) for a in s) for s in slots]


def _psi_at_gauss(model: AffineModel, space: FeSpace) -> np.ndarray:
    if model.dims == 0:
        return np.zeros((0, space.n_el * 3))
    return np.stack([p(space.gauss_x).ravel() for p in model.psi])


def _dpsi_at_gauss(model: AffineModel, space: FeSpace) -> np.ndarray:
    if model.dims == 0:
        return np.zeros((0, space.n_el * 3))
    return np.stack([p.gradient(space.gauss_x).ravel() for p in model.psi])


def compute_taylor(model: AffineModel, space: FeSpace, index_set: DownwardClosedSet,
                   f=1.0) -> TaylorExpansion:
    """Taylor coefficients ``t_nu`` for every ``nu`` in ``index_set``."""
    if model.theta >= 1.0:
        raise ValueError(f"theta = {model.theta:.4g} >= 1")
    if index_set.dims > model.dims:
        raise ValueError("index set uses dimensions beyond the model's parameters")
    abar_q = coefficient_at_gauss(space, model.abar)
    factor = factorize(space, abar_q)
    psi_q = _psi_at_gauss(model, space)
    G = space.grad_op

    layers = _layers(index_set)
    indices: list[MultiIndex] = []
    blocks: list[np.ndarray] = []
    row: dict[MultiIndex, int] = {}
    prev_rows = None
    prev_grad = None
    for n, members in enumerate(layers):
        if n == 0:
            block = cho_solve(factor, load_vector(space, f))[None, :]
        elif not members:
            break
        else:
            local = {nu: r - prev_rows for nu, r in row.items() if r >= prev_rows}
            flux = np.zeros((len(members), space.n_el * 3))
            for pos, dim, par in _parent_slots(members, local):
                flux[pos] += psi_q[dim] * prev_grad[par]
            block = cho_solve(factor, -flux_load(space, flux.reshape(len(members), space.n_el, 3)))
            block = np.atleast_2d(block)
        prev_rows = len(indices)
        for nu in members:
            row[nu] = len(indices)
            indices.append(nu)
        blocks.append(block)
        prev_grad = (G @ block.T).T
    coeffs = np.vstack(blocks)
    return TaylorExpansion(model, space, index_set, f, indices, coeffs)


def compute_laplacians(exp: TaylorExpansion) -> TaylorExpansion:
    """Fill in the strong-form Laplacians ``Delta t_nu`` at the Gauss points."""
    space, model = exp.space, exp.model
    abar_q = coefficient_at_gauss(space, model.abar).ravel()
    if np.any(abar_q <= 0.0):
        raise ValueError("abar is not positive at a quadrature point")
    dabar_q = model.abar.gradient(space.gauss_x).ravel()
    psi_q = _psi_at_gauss(model, space)
    dpsi_q = _dpsi_at_gauss(model, space)
    grads = (space.grad_op @ exp.coeffs.T).T
    lap = np.zeros_like(grads)
    f_q = coefficient_at_gauss(space, exp.f).ravel()
    lap[0] = -(f_q + dabar_q * grads[0]) / abar_q
    row = exp.row
    for n in range(1, exp.max_degree + 1):
        rows = np.nonzero(exp.degrees == n)[0]
        members = [exp.indices[i] for i in rows]
        acc = dabar_q * grads[rows]
        for pos, dim, par in _parent_slots(members, row):
            acc[pos] += psi_q[dim] * lap[par] + dpsi_q[dim] * grads[par]
        lap[rows] = -acc / abar_q
    exp.laplacians = lap
    exp.norms_W = norms_Ltau(space, lap, 2.0)
    exp._ltau_cache = {2.0: exp.norms_W}
    return exp


@dataclass
class SummabilityReport:
    D: np.ndarray
    C: np.ndarray | None
    theta: float
    kappa: float
    n_max: int
    complete: np.ndarray
    weighted_l2_V: float | None = None
    weighted_l2_W: float | None = None
    extras: dict = field(default_factory=dict)

    @property
    def complete_layers(self) -> int:
        """Number of leading layers that are complete."""
        bad = np.nonzero(~self.complete)[0]
        return int(bad[0]) if bad.size else len(self.complete)

    def decay_ratios(self) -> np.ndarray:
        k = self.complete_layers
        return self.D[1:k] / (self.kappa ** np.arange(1, k) * self.D[0])

    def to_dict(self) -> dict:
        return {
            "D": self.D.tolist(), "C": None if self.C is None else self.C.tolist(),
            "theta": self.theta, "kappa": self.kappa, "n_max": self.n_max,
            "complete": self.complete.tolist(),
            "weighted_l2_V": self.weighted_l2_V, "weighted_l2_W": self.weighted_l2_W, **self.extras,
        }


def kappa_from_theta(theta: float) -> float:
    return theta / (2.0 - theta)


def layer_sums(exp: TaylorExpansion, rho: WeightSequence | None = None) -> SummabilityReport:
    """``D_n = sum int abar |t_nu'|^2`` and ``C_n = sum int abar |Delta t_nu|^2`` per layer."""
    space = exp.space
    wq = (space.gauss_w * coefficient_at_gauss(space, exp.model.abar)).ravel()
    grads = (space.grad_op @ exp.coeffs.T).T
    d = (grads * grads) @ wq
    n_max = exp.max_degree
    D = np.array([d[exp.degrees == n].sum() for n in range(n_max + 1)])
    C = None
    if exp.laplacians is not None:
        c = (exp.laplacians**2) @ wq
        C = np.array([c[exp.degrees == n].sum() for n in range(n_max + 1)])
    theta = exp.model.theta
    complete = np.array([exp.layer_complete(n) for n in range(n_max + 1)])
    rep = SummabilityReport(D, C, theta, kappa_from_theta(theta), n_max, complete)
    if rho is not None:
        rep.weighted_l2_V = weighted_l2(exp, rho, "V")
        if exp.norms_W is not None:
            rep.weighted_l2_W = weighted_l2(exp, rho, "W")
    return rep


def weighted_l2(exp: TaylorExpansion, rho: WeightSequence | None, which: str = "V") -> float:
    """``sum_nu (rho^nu ||t_nu||)^2`` over the stored indices."""
    v = exp.weights(rho) * exp.metric(which)
    return float(np.sum(v * v))


@dataclass(frozen=True)
class LpResult:
    value: float
    p: float
    holder_bound: float | None = None
    q: float | None = None


def lp_quasinorm(values: Sequence[float], p: float, weights: Sequence[float] | None = None,
                 rho: WeightSequence | None = None, dims: int | None = None) -> LpResult:
    """``(sum v^p)^(1/p)`` and, given weights ``rho^nu``, the Hoelder bound.

    With ``1/p = 1/2 + 1/q`` the bound is
    ``(sum (rho^nu v_nu)^2)^(1/2) * prod_j (1 - rho_j^-q)^(-1/q)``.
    """
    if not 0.0 < p <= 2.0:
        raise ValueError("p must lie in (0, 2]")
    v = np.abs(np.asarray(values, dtype=float))
    value = float(np.sum(v**p) ** (1.0 / p))
    if rho is None or weights is None:
        return LpResult(value, p)
    wl2 = math.sqrt(float(np.sum((np.asarray(weights) * v) ** 2)))
    if p == 2.0:
        return LpResult(value, p, wl2, math.inf)
    q = 2.0 * p / (2.0 - p)
    r = rho.array(dims if dims is not None else len(rho))
    if np.any(r <= 1.0):
        raise ValueError("Hoelder bound needs rho_j > 1")
    log_sum = -np.sum(np.log1p(-(r ** -q)))
    return LpResult(value, p, wl2 * math.exp(log_sum / q), q)


def select_best_n(exp: TaylorExpansion, n: int, metric: str = "V") -> list[tuple[MultiIndex, float]]:
    """The ``n`` indices of largest norm; ties by degree then entries."""
    vals = exp.metric(metric)
    order = sorted(range(len(exp)), key=lambda i: (-vals[i], exp.indices[i].sort_key()))
    return [(exp.indices[i], float(vals[i])) for i in order[: max(n, 0)]]


def monomials(indices: Sequence[MultiIndex], y: np.ndarray) -> np.ndarray:
    """``y^nu`` via sign and log magnitude, with exact zeros."""
    out = np.ones(len(indices))
    logy = np.log(np.abs(y), where=y != 0, out=np.full(y.shape, -np.inf))
    for i, nu in enumerate(indices):
        if not nu.entries:
            continue
        s = 0.0
        sign = 1.0
        for j, k in nu:
            if y[j - 1] == 0.0:
                sign = 0.0
                break
            s += k * logy[j - 1]
            if y[j - 1] < 0 and k % 2:
                sign = -sign
        out[i] = 0.0 if sign == 0.0 else sign * math.exp(s)
    return out


def eval_truncated(exp: TaylorExpansion, Lambda: Iterable[MultiIndex], y: Sequence[float]) -> GridFunction:
    """``sum_{nu in Lambda} t_nu y^nu``."""
    y = np.asarray(y, dtype=float)
    if y.size != exp.model.dims:
        raise ValueError(f"expected {exp.model.dims} parameters")
    if np.any(np.abs(y) > 1.0):
        raise ValueError("Taylor evaluation needs |y_j| <= 1")
    Lambda = list(Lambda)
    rows = np.array([exp.row[nu] for nu in Lambda], dtype=np.int64)
    if rows.size == 0:
        return GridFunction.zero(exp.space)
    return GridFunction(exp.space, monomials(Lambda, y) @ exp.coeffs[rows])


def direct_solve(model, space: FeSpace, y: Sequence[float], f=1.0, check_residual: bool = False) -> GridFunction:
    """Galerkin solution at a single parameter ``y``."""
    aq = model.evaluate(y, space.gauss_x)
    return solve_dirichlet(space, aq, f, check_residual=check_residual)


@dataclass(frozen=True)
class SupErrorResult:
    estimate: float
    tail_bound: float
    seed: int | None
    n_samples: int
    argmax: np.ndarray


def sup_error_estimate(exp: TaylorExpansion, Lambda: Iterable[MultiIndex], M: int = 64,
                       seed: int | None = 0, samples: np.ndarray | None = None) -> SupErrorResult:
    """Max over ``M`` seeded uniform samples of ``||u_h(y) - sum_Lambda t_nu y^nu||_V``.

    ``tail_bound`` is ``sum ||t_nu||_V`` over the stored indices outside ``Lambda``.
    """
    Lambda = list(Lambda)
    J = exp.model.dims
    if samples is None:
        rng = np.random.default_rng(seed)
        samples = rng.uniform(-1.0, 1.0, size=(M, J))
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    rows = np.array([exp.row[nu] for nu in Lambda], dtype=np.int64)
    worst, arg = 0.0, samples[0]
    for y in samples:
        u = direct_solve(exp.model, exp.space, y, exp.f)
        approx = monomials(Lambda, y) @ exp.coeffs[rows] if rows.size else 0.0
        e = math.sqrt(float(energy_sq(exp.space, u.coeffs - approx)))
        if e > worst:
            worst, arg = e, y
    keep = np.ones(len(exp), dtype=bool)
    keep[rows] = False
    tail = float(exp.norms_V[keep].sum())
    return SupErrorResult(worst, tail, seed, len(samples), np.array(arg))


@dataclass(frozen=True)
class LtauResult:
    total: float
    per_layer: np.ndarray
    tau: float


def ltau_summability(exp: TaylorExpansion, tau: float, rho: WeightSequence | None = None) -> LtauResult:
    """``sum (rho^nu (||t_nu||_V + ||Delta t_nu||_{L^tau}))^tau`` with its per-layer split."""
    v = (exp.weights(rho) * (exp.norms_V + exp.norms_Ltau(tau))) ** tau
    per = np.array([v[exp.degrees == n].sum() for n in range(exp.max_degree + 1)])
    return LtauResult(float(v.sum()), per, tau)

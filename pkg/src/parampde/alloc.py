"""Per-index spatial degrees of freedom and rate arithmetic for fully discrete expansions.

For a selection of ``n`` coefficients with norms ``x_nu`` the spatial sizes
``n_nu`` minimize ``sum n_nu`` subject to a saturated error budget:

* sup setting:  ``sum n_nu^{-t} x_nu = n^{-s}``,       ``n_nu ~ x_nu^{1/(1+t)}``
* l2 setting:   ``sum n_nu^{-2t} x_nu^2 = n^{-2s}``,   ``n_nu ~ x_nu^{2/(1+2t)}``
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .multiindex import MultiIndex

SETTINGS = ("sup", "l2")


@dataclass
class AllocationPlan:
    norms: np.ndarray
    n_real: np.ndarray
    n_int: np.ndarray
    eta: float
    N_real: float
    N_int: int
    setting: str
    s: float
    t: float
    n: float
    indices: list[MultiIndex] | None = None
    mode: str = "optimal"

    def constraint_residual(self) -> float:
        """Relative deviation of the error budget from ``n^{-s}`` (zero-norm entries excluded)."""
        pos = self.norms > 0
        if self.setting == "sup":
            lhs = np.sum(self.n_real[pos] ** -self.t * self.norms[pos])
            target = self.n ** -self.s
        else:
            lhs = np.sum(self.n_real[pos] ** (-2 * self.t) * self.norms[pos] ** 2)
            target = self.n ** (-2 * self.s)
        return float(abs(lhs - target) / target)

    def error_budget(self, dofs: np.ndarray | None = None) -> float:
        """Model error ``sum n^-t x`` (sup) or ``(sum n^-2t x^2)^(1/2)`` (l2) for given dofs."""
        d = self.n_int if dofs is None else np.asarray(dofs, dtype=float)
        if self.setting == "sup":
            return float(np.sum(d ** -self.t * self.norms))
        return float(np.sqrt(np.sum(d ** (-2 * self.t) * self.norms**2)))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["nu", "norm_X", "n_real", "n_int"])
            for i in range(len(self.norms)):
                nu = "" if self.indices is None else json.dumps(self.indices[i].to_json())
                w.writerow([nu, repr(float(self.norms[i])), repr(float(self.n_real[i])), int(self.n_int[i])])


def _round(n_real: np.ndarray) -> np.ndarray:
    # the small relative slack keeps exact integers such as 3.0000000000000004 at 3
    return np.maximum(1, np.ceil(n_real * (1 - 1e-12))).astype(np.int64)


def _allocate(norms, s: float, t: float, n: float, setting: str,
              indices: Sequence[MultiIndex] | None) -> AllocationPlan:
    x = np.asarray(norms, dtype=float)
    if x.size == 0:
        raise ValueError("cannot allocate over an empty index set")
    if np.any(x < 0) or not np.all(np.isfinite(x)):
        raise ValueError("norms must be finite and nonnegative")
    if s <= 0 or t <= 0 or n <= 0:
        raise ValueError("need s, t, n > 0")
    pos = x > 0
    if not np.any(pos):
        raise ValueError("all norms vanish")
    if setting == "sup":
        e, power = 1.0 / (1.0 + t), 1.0 / t
    elif setting == "l2":
        e, power = 2.0 / (1.0 + 2.0 * t), 1.0 / (2.0 * t)
    else:
        raise ValueError(f"setting must be one of {SETTINGS}")
    xe = np.where(pos, x, 0.0) ** e
    S = float(xe[pos].sum())
    eta = n ** (s / t) * S**power
    n_real = np.where(pos, eta * xe, 0.0)
    if not np.all(n_real < 2.0**62):
        raise ValueError(f"allocation overflows: largest size {n_real.max():.3g}")
    N_real = n ** (s / t) * S ** (power + 1.0)
    n_int = _round(n_real)
    return AllocationPlan(x, n_real, n_int, float(eta), float(N_real), int(n_int.sum()),
                          setting, s, t, n, None if indices is None else list(indices))


def allocate(norms_X, s: float, t: float, n: float,
             indices: Sequence[MultiIndex] | None = None) -> AllocationPlan:
    """Optimal sizes for the sup-norm error budget ``sum n_nu^{-t} x_nu = n^{-s}``."""
    return _allocate(norms_X, s, t, n, "sup", indices)


def allocate_l2(norms_X, s: float, t: float, n: float,
                indices: Sequence[MultiIndex] | None = None) -> AllocationPlan:
    """Optimal sizes for the mean-square budget ``sum n_nu^{-2t} x_nu^2 = n^{-2s}``."""
    return _allocate(norms_X, s, t, n, "l2", indices)


def balanced_n_hat(n: float, s: float, t: float, c: float = 1.0) -> int:
    """Spatial size ``ceil(c n^{s/t})`` balancing parametric and spatial errors."""
    return max(1, math.ceil(c * n ** (s / t) * (1 - 1e-12)))


def fixed_space_baseline(norms_V, n: int, n_hat: int, s: float = 1.0, t: float = 1.0,
                         setting: str = "l2", indices: Sequence[MultiIndex] | None = None) -> AllocationPlan:
    """Every selected coefficient gets the same ``n_hat`` dofs; ``N = n * n_hat``."""
    x = np.asarray(norms_V, dtype=float)
    if x.size != n:
        raise ValueError(f"expected {n} norms, got {x.size}")
    if n_hat < 1:
        raise ValueError("n_hat must be >= 1")
    n_real = np.full(n, float(n_hat))
    return AllocationPlan(x, n_real, n_real.astype(np.int64), float("nan"), float(n * n_hat),
                          int(n * n_hat), setting, s, t, n, None if indices is None else list(indices),
                          mode="fixed")


@dataclass(frozen=True)
class RateParams:
    s: float
    t: float
    p_V: float
    p_X: float
    setting: str = "sup"

    def __post_init__(self) -> None:
        if self.setting not in SETTINGS:
            raise ValueError(f"setting must be one of {SETTINGS}")
        if not 0.0 < self.p_V <= self.p_X < 2.0:
            raise ValueError("need 0 < p_V <= p_X < 2")
        if self.s <= 0 or self.t <= 0:
            raise ValueError("need s, t > 0")

    @property
    def offset(self) -> float:
        return 1.0 if self.setting == "sup" else 0.5

    @classmethod
    def derived(cls, t: float, p_V: float, p_X: float, setting: str = "sup") -> RateParams:
        """``s = 1/p_V - 1`` (sup) or ``1/p_V - 1/2`` (l2)."""
        c = 1.0 if setting == "sup" else 0.5
        return cls(1.0 / p_V - c, t, p_V, p_X, setting)


@dataclass(frozen=True)
class RatePrediction:
    rate: float
    regime: int
    r_formula: float
    bracket: tuple[float, float]


def predict_rate(params: RateParams) -> RatePrediction:
    """Fully discrete rate: ``t`` in regime 1, the mixed rate ``r`` in regime 2.

    ``r = s t / (s + t - (1/p_X - c))`` with ``c = 1`` (sup) or ``1/2`` (l2); in the
    sup setting this equals ``s t / (s + (1+t) delta)``, ``delta = 1 - 1/(p_X (1+t))``.
    ``r_formula`` is ``inf`` when the denominator is not positive (regime 1 only). In regime 2 ``r`` lies in ``[1/p_X - c, 1/p_V - c]``; this is asserted.
    """
    s, t, c = params.s, params.t, params.offset
    if params.setting == "sup":
        regime1 = params.p_X <= 1.0 / (t + 1.0)
    else:
        regime1 = params.p_X <= 2.0 / (2.0 * t + 1.0)
    denom = s + t - (1.0 / params.p_X - c)
    # in regime 1 the denominator may vanish or turn negative; r is then unbounded
    r = s * t / denom if denom > 0 else math.inf
    bracket = (1.0 / params.p_X - c, 1.0 / params.p_V - c)
    if regime1:
        return RatePrediction(t, 1, r, bracket)
    tol = 1e-12 * max(1.0, abs(r))
    if abs(s - bracket[1]) <= tol:  # the bracket presumes s was derived from p_V
        assert bracket[0] - tol <= r <= bracket[1] + tol, f"rate {r} outside {bracket}"
    return RatePrediction(r, 2, r, bracket)


def wavelet_predicted_rates(alpha: float, m: int, mode: str) -> float:
    """Limiting rates for the wavelet coefficient model: linear or nonlinear spatial approximation."""
    if alpha <= 0 or m < 1:
        raise ValueError("need alpha > 0 and m >= 1")
    if mode == "linear":
        return alpha / (2.0 * m)
    if mode == "nonlinear":
        if m == 1:
            return min(2.0 * alpha / 3.0, 1.0)
        return min(alpha, 1.0) / m
    raise ValueError("mode must be 'linear' or 'nonlinear'")

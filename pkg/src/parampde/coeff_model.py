"""Diffusion coefficient parametrizations on D = (0, 1).

Fields are piecewise linear on a uniform grid (value at the left and right end
of every cell, so jumps across breakpoints are allowed).  Affine models
``a(y) = abar + sum_j y_j psi_j`` and lognormal models ``a(y) = exp(sum_j y_j psi_j)``
share the same field representation; all sup-norms are computed exactly from
the cell data.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .multiindex import WeightSequence

#: ``1 + (1 - 1/sqrt(2))^2``, the threshold in the lognormal rescaling condition.
THETA_HERMITE = 1.0 + (1.0 - 1.0 / math.sqrt(2.0)) ** 2


class EllipticityWarning(UserWarning):
    """Weighted ellipticity constant is not below one."""


@dataclass(frozen=True)
class PiecewiseField:
    """Piecewise linear field on ``n_cells`` uniform cells of (0, 1)."""

    left: np.ndarray
    right: np.ndarray

    def __post_init__(self) -> None:
        left = np.asarray(self.left, dtype=float).copy()
        right = np.asarray(self.right, dtype=float).copy()
        if left.shape != right.shape or left.ndim != 1 or left.size == 0:
            raise ValueError("left/right must be equal-length 1D arrays")
        if not (np.all(np.isfinite(left)) and np.all(np.isfinite(right))):
            raise ValueError("field values must be finite")
        left.flags.writeable = False
        right.flags.writeable = False
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)

    @property
    def n_cells(self) -> int:
        return self.left.size

    @classmethod
    def constant(cls, value: float, n_cells: int = 1) -> PiecewiseField:
        v = np.full(n_cells, float(value))
        return cls(v, v)

    @classmethod
    def from_nodal(cls, values: Sequence[float]) -> PiecewiseField:
        """Continuous field from values at the ``n_cells + 1`` uniform breakpoints."""
        v = np.asarray(values, dtype=float)
        if v.size < 2:
            raise ValueError("need at least two breakpoint values")
        return cls(v[:-1], v[1:])

    @classmethod
    def from_cells(cls, values: Sequence[float]) -> PiecewiseField:
        """Piecewise constant field, one value per cell."""
        v = np.asarray(values, dtype=float)
        return cls(v, v)

    @classmethod
    def hat(cls, start: float, width: float, height: float, n_cells: int) -> PiecewiseField:
        """Hat function supported on ``[start, start + width]`` peaking at its midpoint.

        The support end points and the midpoint must be grid breakpoints.
        """
        nodes = np.linspace(0.0, 1.0, n_cells + 1)
        mid = start + 0.5 * width
        vals = height * np.clip(1.0 - np.abs(nodes - mid) / (0.5 * width), 0.0, None)
        for p in (start, mid, start + width):
            if abs(p * n_cells - round(p * n_cells)) > 1e-9:
                raise ValueError(f"hat breakpoint {p} not on the {n_cells}-cell grid")
        return cls.from_nodal(vals)

    def refine(self, n_cells: int) -> PiecewiseField:
        """Same function on a finer uniform grid (``n_cells`` a multiple of the current count)."""
        if n_cells == self.n_cells:
            return self
        if n_cells % self.n_cells:
            raise ValueError(f"{n_cells} cells do not refine {self.n_cells} cells")
        r = n_cells // self.n_cells
        s = np.arange(r + 1) / r
        vals = self.left[:, None] + (self.right - self.left)[:, None] * s[None, :]
        return PiecewiseField(vals[:, :-1].ravel(), vals[:, 1:].ravel())

    @property
    def slopes(self) -> np.ndarray:
        return (self.right - self.left) * self.n_cells

    def _locate(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=float)
        cell = np.clip(np.floor(x * self.n_cells).astype(np.int64), 0, self.n_cells - 1)
        s = x * self.n_cells - cell
        return cell, s

    def __call__(self, x: np.ndarray) -> np.ndarray:
        cell, s = self._locate(x)
        return self.left[cell] + (self.right[cell] - self.left[cell]) * s

    def gradient(self, x: np.ndarray) -> np.ndarray:
        cell, _ = self._locate(x)
        return self.slopes[cell]

    def sup_abs(self) -> float:
        return float(max(np.abs(self.left).max(), np.abs(self.right).max()))

    def grad_sup(self) -> float:
        return float(np.abs(self.slopes).max())

    def essinf(self) -> float:
        return float(min(self.left.min(), self.right.min()))

    def __mul__(self, c: float) -> PiecewiseField:
        return PiecewiseField(c * self.left, c * self.right)

    __rmul__ = __mul__

    def to_dict(self) -> dict:
        return {"left": self.left.tolist(), "right": self.right.tolist()}


def _common_grid(fields: Sequence[PiecewiseField]) -> int:
    n = 1
    for f in fields:
        n = n * f.n_cells // math.gcd(n, f.n_cells)
    return n


def _stack(fields: Sequence[PiecewiseField], n_cells: int) -> tuple[np.ndarray, np.ndarray]:
    if not fields:
        z = np.zeros((0, n_cells))
        return z, z
    refined = [f.refine(n_cells) for f in fields]
    return np.stack([f.left for f in refined]), np.stack([f.right for f in refined])


def weighted_abs_sup(left: np.ndarray, right: np.ndarray, weights: np.ndarray,
                     den_left: np.ndarray | None = None, den_right: np.ndarray | None = None) -> float:
    """Exact ``|| sum_j w_j |psi_j| / den ||_inf`` for piecewise linear data.

    On each cell the numerator is piecewise linear with kinks only where some
    ``psi_j`` changes sign, and a ratio of linear functions is monotone, so the
    maximum is attained at a cell end point or at one of those sign changes.
    """
    J, n = left.shape
    if J == 0:
        return 0.0
    if den_left is None:
        den_left = np.ones(n)
        den_right = np.ones(n)
    cand = [np.zeros((1, n)), np.ones((1, n))]
    with np.errstate(divide="ignore", invalid="ignore"):
        s = left / (left - right)
    s = np.where((left * right < 0) & np.isfinite(s), s, 0.0)
    cand.append(s)
    S = np.concatenate(cand, axis=0)  # (C, n)
    # numerator at every candidate: sum_j w_j |l_j + (r_j - l_j) s|
    num = np.zeros(S.shape)
    for j in range(J):
        if weights[j] == 0.0:
            continue
        num += weights[j] * np.abs(left[j][None, :] + (right[j] - left[j])[None, :] * S)
    den = den_left[None, :] + (den_right - den_left)[None, :] * S
    return float(np.max(num / den))


class AffineModel:
    """``a(y) = abar + sum_j y_j psi_j`` with ``y_j`` in [-1, 1]."""

    kind = "affine"

    def __init__(self, abar: PiecewiseField, psi: Sequence[PiecewiseField], check: bool = True) -> None:
        self.abar = abar
        self.psi = tuple(psi)
        self.n_cells = _common_grid([abar, *self.psi])
        a = abar.refine(self.n_cells)
        self._abar_l, self._abar_r = a.left, a.right
        self._psi_l, self._psi_r = _stack(self.psi, self.n_cells)
        self.abar_min = a.essinf()
        if self.abar_min <= 0.0:
            raise ValueError(f"essinf abar = {self.abar_min} must be positive")
        self.theta = self.theta_weighted(None)
        if check and self.theta >= 1.0:
            raise ValueError(f"uniform ellipticity violated: theta = {self.theta:.6g} >= 1")

    @property
    def dims(self) -> int:
        return len(self.psi)

    def _weights(self, rho: WeightSequence | None) -> np.ndarray:
        if rho is None:
            return np.ones(self.dims)
        return rho.array(self.dims)

    def theta_weighted(self, rho: WeightSequence | None) -> float:
        return weighted_abs_sup(self._psi_l, self._psi_r, self._weights(rho), self._abar_l, self._abar_r)

    def grad_weighted_sum(self, rho: WeightSequence | None = None) -> float:
        if self.dims == 0:
            return 0.0
        slopes = (self._psi_r - self._psi_l) * self.n_cells
        return float(np.max(self._weights(rho) @ np.abs(slopes)))

    def abs_weighted_sup(self, rho: WeightSequence | None = None) -> float:
        """``|| sum_j rho_j |psi_j| ||_inf`` (no division by abar)."""
        return weighted_abs_sup(self._psi_l, self._psi_r, self._weights(rho))

    def truncate(self, dims: int) -> AffineModel:
        return AffineModel(self.abar, self.psi[:dims])

    def evaluate(self, y: Sequence[float], x: np.ndarray) -> np.ndarray:
        """``a(y)`` at points ``x``; requires ``|y_j| <= 1``."""
        y = np.asarray(y, dtype=float)
        if y.size != self.dims:
            raise ValueError(f"expected {self.dims} parameters, got {y.size}")
        if np.any(np.abs(y) > 1.0 + 1e-14):
            raise ValueError("affine parameters must satisfy |y_j| <= 1")
        vals = self.abar(x) + sum(yj * p(x) for yj, p in zip(y, self.psi) if yj != 0.0)
        vals = np.asarray(vals, dtype=float) * np.ones_like(np.asarray(x, dtype=float))
        floor = self.abar_min * (1.0 - self.theta)
        assert np.all(vals >= floor - 1e-12), "affine coefficient fell below abar (1 - theta)"
        return vals

    def gradient(self, y: Sequence[float], x: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        g = self.abar.gradient(x) + sum(yj * p.gradient(x) for yj, p in zip(y, self.psi) if yj != 0.0)
        return np.asarray(g, dtype=float) * np.ones_like(np.asarray(x, dtype=float))


class LognormalModel:
    """``a(y) = exp(sum_j y_j psi_j)`` with i.i.d. standard Gaussian ``y_j``."""

    kind = "lognormal"
    clamp = 1e-8

    def __init__(self, psi: Sequence[PiecewiseField]) -> None:
        self.psi = tuple(psi)
        self.n_cells = _common_grid(self.psi) if self.psi else 1
        self._psi_l, self._psi_r = _stack(self.psi, self.n_cells)

    @property
    def dims(self) -> int:
        return len(self.psi)

    def abs_weighted_sup(self, rho: WeightSequence | None = None) -> float:
        w = np.ones(self.dims) if rho is None else rho.array(self.dims)
        return weighted_abs_sup(self._psi_l, self._psi_r, w)

    def grad_weighted_sum(self, rho: WeightSequence | None = None) -> float:
        if self.dims == 0:
            return 0.0
        w = np.ones(self.dims) if rho is None else rho.array(self.dims)
        slopes = (self._psi_r - self._psi_l) * self.n_cells
        return float(np.max(w @ np.abs(slopes)))

    def exponent(self, y: Sequence[float], x: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.size != self.dims:
            raise ValueError(f"expected {self.dims} parameters, got {y.size}")
        if not np.all(np.isfinite(y)):
            raise ValueError("lognormal parameters must be finite")
        b = np.zeros(np.shape(x))
        for yj, p in zip(y, self.psi):
            if yj != 0.0:
                b = b + yj * p(x)
        return b

    def evaluate(self, y: Sequence[float], x: np.ndarray) -> np.ndarray:
        a = np.exp(self.exponent(y, x))
        if np.any(a < self.clamp):
            warnings.warn("lognormal coefficient clamped below at 1e-8", RuntimeWarning, stacklevel=2)
            a = np.maximum(a, self.clamp)
        return a

    def gradient(self, y: Sequence[float], x: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        db = np.zeros(np.shape(x))
        for yj, p in zip(y, self.psi):
            if yj != 0.0:
                db = db + yj * p.gradient(x)
        return self.evaluate(y, x) * db


def theta_uniform(model: AffineModel) -> float:
    """``|| sum_j |psi_j| / abar ||_inf``."""
    return model.theta_weighted(None)


def theta_weighted(model: AffineModel, rho: WeightSequence) -> float:
    """``|| sum_j rho_j |psi_j| / abar ||_inf``; values >= 1 are returned, not rejected."""
    return model.theta_weighted(rho)


def grad_weighted_sum(model: AffineModel | LognormalModel, rho: WeightSequence | None = None) -> float:
    """``|| sum_j rho_j |psi_j'| ||_inf`` from the piecewise constant slopes."""
    return model.grad_weighted_sum(rho)


def evaluate_a(model: AffineModel | LognormalModel, y: Sequence[float], x: np.ndarray) -> np.ndarray:
    return model.evaluate(y, x)


@dataclass(frozen=True)
class WaveletFamily:
    """Dyadic hat functions with level-``l`` amplitude ``C 2^{-alpha l}``, levels ``0..L``."""

    alpha: float
    C: float
    L: int
    overlap: int = 2

    def __post_init__(self) -> None:
        if self.alpha <= 0 or self.C <= 0 or self.L < 0:
            raise ValueError("need alpha > 0, C > 0 and L >= 0")

    @property
    def count(self) -> int:
        return 2 ** (self.L + 1) - 1

    def levels(self) -> np.ndarray:
        """Level of every function in the coarse-to-fine enumeration."""
        return np.concatenate([np.full(2**l, l) for l in range(self.L + 1)])

    def heights(self) -> np.ndarray:
        return self.C * 2.0 ** (-self.alpha * self.levels())


def build_wavelet_model(fam: WaveletFamily, dims: int | None = None) -> AffineModel:
    """Affine model with ``abar = 1`` and hats enumerated level by level, left to right.

    ``dims`` keeps only the first ``dims`` functions of the enumeration.
    """
    n_cells = 2 ** (fam.L + 1)
    psi = []
    for l in range(fam.L + 1):
        width = 2.0**-l
        h = fam.C * 2.0 ** (-fam.alpha * l)
        for k in range(2**l):
            psi.append(PiecewiseField.hat(k * width, width, h, n_cells))
    if dims is not None:
        psi = psi[:dims]
    model = AffineModel(PiecewiseField.constant(1.0, n_cells), psi, check=False)
    if model.theta >= 1.0:
        raise ValueError(f"wavelet model has theta = {model.theta:.4g} >= 1; choose a smaller C")
    model.levels = fam.levels()[: len(psi)]
    return model


def wavelet_theta_bound(fam: WaveletFamily) -> float:
    """Geometric upper bound ``C / (1 - 2^{-alpha})`` on theta (one hat per level at any point)."""
    return fam.C / (1.0 - 2.0**-fam.alpha)


def wavelet_weights(fam: WaveletFamily, beta: float, c: float, model: AffineModel | None = None,
                    dims: int | None = None) -> WeightSequence:
    """``rho_j = 1 + c 2^{beta |lambda(j)|}`` along the coarse-to-fine enumeration.

    When ``model`` is given and the weighted ellipticity constant is not below
    one, an :class:`EllipticityWarning` is issued; shrink ``c`` in that case.
    """
    if not 0.0 < beta < fam.alpha:
        raise ValueError("need 0 < beta < alpha")
    if c < 0:
        raise ValueError("c must be nonnegative")
    levels = fam.levels()
    if dims is not None:
        levels = levels[:dims]
    rho = WeightSequence(tuple(1.0 + c * 2.0 ** (beta * levels)))
    if model is not None:
        th = model.theta_weighted(rho)
        if th >= 1.0:
            warnings.warn(f"weighted theta = {th:.4g} >= 1 for c = {c}; use a smaller c",
                          EllipticityWarning, stacklevel=2)
    return rho


def tune_wavelet_weights(fam: WaveletFamily, beta: float, model: AffineModel,
                         c0: float = 1.0, target: float = 1.0) -> tuple[WeightSequence, float]:
    """Largest dyadic ``c <= c0`` whose weights keep the weighted theta below ``target``."""
    c = c0
    for _ in range(200):
        rho = wavelet_weights(fam, beta, c, dims=model.dims)
        if model.theta_weighted(rho) < target:
            return rho, c
        c *= 0.5
    raise RuntimeError("could not find admissible wavelet weights")


def rescale_weights_lognormal(model: LognormalModel | AffineModel, rho: WeightSequence, r: int) -> WeightSequence:
    """Scale ``rho`` by the largest dyadic ``tau <= 1`` with ``K(tau rho) < ln(theta_H) / sqrt(r)``."""
    if r < 1:
        raise ValueError("r must be a positive integer")
    bound = math.log(THETA_HERMITE) / math.sqrt(r)
    K = model.abs_weighted_sup(rho)
    if not math.isfinite(K):
        raise ValueError("sum_j rho_j |psi_j| is not bounded")
    tau = 1.0
    while tau * K >= bound:
        tau *= 0.5
    return rho if tau == 1.0 else rho.scaled(tau)


def wavelet_family_for_theta(alpha: float, L: int, theta: float, dims: int | None = None) -> WaveletFamily:
    """Family whose amplitude ``C`` yields the requested theta (theta is linear in ``C``)."""
    if not 0.0 < theta < 1.0:
        raise ValueError("target theta must lie in (0, 1)")
    probe = WaveletFamily(alpha, 1e-3, L)
    th = build_wavelet_model(probe, dims).theta / 1e-3
    return WaveletFamily(alpha, theta / th, L)

"""Log-log least-squares rate fits shared by the spatial and end-to-end studies."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MIN_POINTS = 4


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    residual: float
    n_points: int

    @property
    def rate(self) -> float:
        """Decay rate, i.e. the negated slope."""
        return -self.slope

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.exp(self.intercept) * np.asarray(x, dtype=float) ** self.slope


def fit_rate(x, e, min_points: int = MIN_POINTS) -> RateFit:
    """Fit ``log e = slope * log x + intercept``.

    ``residual`` is the root-mean-square deviation in log space.
    """
    x = np.asarray(x, dtype=float).ravel()
    e = np.asarray(e, dtype=float).ravel()
    if x.shape != e.shape:
        raise FitError("x and e must have the same length")
    if x.size < min_points:
        raise FitError(f"refusing to fit {x.size} point(s); need at least {min_points}")
    if np.any(x <= 0) or np.any(e <= 0):
        raise FitError("log-log fit needs positive data")
    lx, le = np.log(x), np.log(e)
    if np.ptp(lx) == 0:
        raise FitError("all abscissae coincide")
    A = np.column_stack([lx, np.ones_like(lx)])
    (slope, intercept), *_ = np.linalg.lstsq(A, le, rcond=None)
    res = float(np.sqrt(np.mean((A @ np.array([slope, intercept]) - le) ** 2)))
    return RateFit(float(slope), float(intercept), res, int(x.size))


def decades(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.log10(x.max() / x.min()))

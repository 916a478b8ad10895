"""Finitely supported multi-indices, downward-closed index sets and weight algebra.

A multi-index is stored sparsely as a sorted tuple of ``(j, nu_j)`` pairs with
1-based dimensions and strictly positive exponents, so the zero index is the
empty tuple.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

_INT64_MAX = 2**63 - 1
_FACTORIAL_MAX_DEGREE = 20


@dataclass(frozen=True, order=False)
class MultiIndex:
    entries: tuple[tuple[int, int], ...] = ()
    degree: int = field(init=False, compare=False, repr=False)

    def __post_init__(self) -> None:
        prev = 0
        total = 0
        for j, k in self.entries:
            if j <= prev:
                raise ValueError(f"dimensions must be strictly increasing and >= 1: {self.entries}")
            if k <= 0:
                raise ValueError(f"stored exponents must be positive: {self.entries}")
            prev = j
            total += k
        object.__setattr__(self, "degree", total)

    @classmethod
    def zero(cls) -> MultiIndex:
        return _ZERO

    @classmethod
    def unit(cls, j: int, k: int = 1) -> MultiIndex:
        return cls(((j, k),)) if k else _ZERO

    @classmethod
    def from_dense(cls, values: Sequence[int]) -> MultiIndex:
        """Build from a dense exponent vector whose first entry is dimension 1."""
        return cls(tuple((j + 1, int(k)) for j, k in enumerate(values) if k))

    @classmethod
    def from_pairs(cls, pairs: Iterable[Sequence[int]]) -> MultiIndex:
        return cls(tuple(sorted((int(j), int(k)) for j, k in pairs if k)))

    def __getitem__(self, j: int) -> int:
        for jj, k in self.entries:
            if jj == j:
                return k
            if jj > j:
                break
        return 0

    def __iter__(self) -> Iterator[tuple[int, int]]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __repr__(self) -> str:
        if not self.entries:
            return "MultiIndex(0)"
        return "MultiIndex(" + " + ".join(f"{k}e{j}" if k > 1 else f"e{j}" for j, k in self.entries) + ")"

    @property
    def support(self) -> tuple[int, ...]:
        return tuple(j for j, _ in self.entries)

    @property
    def max_dim(self) -> int:
        return self.entries[-1][0] if self.entries else 0

    @property
    def max_exponent(self) -> int:
        return max((k for _, k in self.entries), default=0)

    def add(self, j: int, k: int = 1) -> MultiIndex:
        d = dict(self.entries)
        d[j] = d.get(j, 0) + k
        if d[j] < 0:
            raise ValueError(f"negative exponent in dimension {j}")
        return MultiIndex(tuple(sorted((jj, kk) for jj, kk in d.items() if kk)))

    def sub(self, j: int) -> MultiIndex:
        return self.add(j, -1)

    def dense(self, dims: int) -> np.ndarray:
        out = np.zeros(dims, dtype=np.int64)
        for j, k in self.entries:
            if j > dims:
                raise ValueError(f"{self!r} has support beyond {dims} dimensions")
            out[j - 1] = k
        return out

    def sort_key(self) -> tuple:
        """Deterministic order: total degree first, then the sparse entry list."""
        return (self.degree, self.entries)

    def to_json(self) -> list[list[int]]:
        return [[j, k] for j, k in self.entries]

    @classmethod
    def from_json(cls, data: Sequence[Sequence[int]]) -> MultiIndex:
        return cls.from_pairs(data)

    def leq(self, other: MultiIndex) -> bool:
        """Componentwise ``self <= other``."""
        return all(other[j] >= k for j, k in self.entries)


_ZERO = MultiIndex(())


@dataclass(frozen=True)
class WeightSequence:
    """Positive weights ``rho_j`` for ``j = 1..len(values)``; ``tail`` for larger j."""

    values: tuple[float, ...]
    tail: float | None = None

    def __post_init__(self) -> None:
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        tail = self.tail if self.tail is not None else (vals[-1] if vals else 1.0)
        object.__setattr__(self, "tail", float(tail))
        for v in vals + (self.tail,):
            if not (math.isfinite(v) and v >= 0.0):
                raise ValueError(f"weights must be finite and nonnegative, got {v}")

    @classmethod
    def constant(cls, value: float, dims: int = 1) -> WeightSequence:
        return cls((value,) * dims, tail=value)

    def __getitem__(self, j: int) -> float:
        if j < 1:
            raise IndexError("weights are 1-based")
        return self.values[j - 1] if j <= len(self.values) else self.tail

    def __len__(self) -> int:
        return len(self.values)

    def array(self, dims: int) -> np.ndarray:
        return np.array([self[j] for j in range(1, dims + 1)], dtype=float)

    def scaled(self, factor: float) -> WeightSequence:
        return WeightSequence(tuple(factor * v for v in self.values), tail=factor * self.tail)

    @property
    def is_strictly_positive(self) -> bool:
        return all(v > 0 for v in self.values) and self.tail > 0


def factorial(nu: MultiIndex) -> int:
    """``nu! = prod_j nu_j!`` with ``0! = 1``."""
    if nu.degree > _FACTORIAL_MAX_DEGREE:
        raise OverflowError(f"|nu| = {nu.degree} exceeds the 64-bit factorial guard ({_FACTORIAL_MAX_DEGREE})")
    out = 1
    for _, k in nu:
        out *= math.factorial(k)
    return out


def weight_power(rho: WeightSequence, nu: MultiIndex) -> float:
    """``rho^nu = prod_j rho_j^{nu_j}``."""
    out = 1.0
    for j, k in nu:
        out *= rho[j] ** k
    return out


def binomial(nu: MultiIndex, mu: MultiIndex) -> int:
    """Componentwise binomial ``prod_j C(nu_j, mu_j)``; zero unless ``mu <= nu``."""
    out = 1
    for j, m in mu:
        n = nu[j]
        if m > n:
            return 0
        out *= math.comb(n, m)
        if out > _INT64_MAX:
            raise OverflowError(f"binomial({nu!r}, {mu!r}) exceeds 64-bit range")
    return out


def b_weight(nu: MultiIndex, rho: WeightSequence, r: int) -> float:
    """``sum_{||mu||_inf <= r} C(nu, mu) rho^{2 mu}``.

    The sum factorizes over the support of ``nu`` because both the binomial and
    the weight are products over dimensions.
    """
    if r < 1:
        raise ValueError("r must be a positive integer")
    out = 1.0
    for j, n in nu:
        rj2 = rho[j] ** 2
        out *= sum(math.comb(n, m) * rj2**m for m in range(min(n, r) + 1))
    return out


def is_downward_closed(members: Iterable[MultiIndex]) -> bool:
    s = set(members)
    if s and MultiIndex.zero() not in s:
        return False
    return all(nu.sub(j) in s for nu in s for j in nu.support)


class DownwardClosedSet:
    """Immutable downward-closed index set that remembers its generation order."""

    def __init__(self, order: Iterable[MultiIndex], check: bool = True) -> None:
        self._order: tuple[MultiIndex, ...] = tuple(dict.fromkeys(order))
        self._members = frozenset(self._order)
        if check and not is_downward_closed(self._members):
            raise ValueError("index set is not downward closed")
        if MultiIndex.zero() not in self._members:
            raise ValueError("index set must contain the zero index")

    @property
    def order(self) -> tuple[MultiIndex, ...]:
        return self._order

    def __contains__(self, nu: object) -> bool:
        return nu in self._members

    def __len__(self) -> int:
        return len(self._order)

    def __iter__(self) -> Iterator[MultiIndex]:
        return iter(self._order)

    def union(self, other: Iterable[MultiIndex]) -> DownwardClosedSet:
        return DownwardClosedSet(itertools.chain(self._order, other))

    @property
    def max_degree(self) -> int:
        return max(nu.degree for nu in self._order)

    @property
    def dims(self) -> int:
        return max((nu.max_dim for nu in self._order), default=0)

    def sorted(self) -> list[MultiIndex]:
        return sorted(self._order, key=MultiIndex.sort_key)


def layer(index_set: Iterable[MultiIndex], n: int) -> list[MultiIndex]:
    """Members with ``|nu| = n`` in deterministic order."""
    return sorted((nu for nu in index_set if nu.degree == n), key=MultiIndex.sort_key)


def _surrogate_key(log_value: float, nu: MultiIndex) -> tuple:
    # Rounding makes exact ties (e.g. 2^-2 reached along two paths) compare equal.
    return (round(log_value, 10), nu.degree, nu.entries)


def generate_envelope(rho: WeightSequence, budget: int, max_degree: int | None = None,
                      dims: int | None = None) -> DownwardClosedSet:
    """The ``budget`` indices with largest ``rho^{-nu}``, grown from the zero index.

    Candidates are restricted to dimensions ``1..dims`` (default ``len(rho)``) and
    to total degree ``|nu| <= max_degree``.  Because every ``rho_j > 1`` the
    surrogate strictly decreases along ``nu -> nu + e_j``, so admitting a candidate
    only once all its parents are present reproduces the global top-``budget`` set.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    dims = len(rho) if dims is None else dims
    logs = []
    for j in range(1, dims + 1):
        if rho[j] <= 1.0:
            raise ValueError(f"rho_{j} = {rho[j]} <= 1: surrogate rho^-nu is not summable")
        logs.append(math.log(rho[j]))
    zero = MultiIndex.zero()
    heap = [(_surrogate_key(0.0, zero), zero, 0.0)]
    chosen: list[MultiIndex] = []
    members: set[MultiIndex] = set()
    queued = {zero}
    while heap and len(chosen) < budget:
        _, nu, lv = heapq.heappop(heap)
        chosen.append(nu)
        members.add(nu)
        if max_degree is not None and nu.degree >= max_degree:
            continue
        for j in range(1, dims + 1):
            child = nu.add(j)
            if child in queued:
                continue
            if all(child.sub(i) in members for i in child.support):
                queued.add(child)
                clv = lv + logs[j - 1]
                heapq.heappush(heap, (_surrogate_key(clv, child), child, clv))
    return DownwardClosedSet(chosen)


def box_index_set(dims: int, max_exponent: int) -> DownwardClosedSet:
    """Tensor box ``{nu : nu_j <= max_exponent, j <= dims}`` in (degree, lexicographic) order."""
    members = [MultiIndex.from_dense(t) for t in itertools.product(range(max_exponent + 1), repeat=dims)]
    return DownwardClosedSet(sorted(members, key=MultiIndex.sort_key))


def total_degree_set(dims: int, max_degree: int) -> DownwardClosedSet:
    """All ``nu`` supported in ``1..dims`` with ``|nu| <= max_degree``."""
    members = [MultiIndex.zero()]
    frontier = [MultiIndex.zero()]
    for _ in range(max_degree):
        nxt = {nu.add(j) for nu in frontier for j in range(1, dims + 1)}
        frontier = sorted(nxt, key=MultiIndex.sort_key)
        members.extend(frontier)
    return DownwardClosedSet(members, check=False)


def layer_size(dims: int, n: int) -> int:
    """Number of multi-indices of total degree ``n`` in ``dims`` dimensions."""
    return math.comb(n + dims - 1, dims - 1) if dims > 0 else int(n == 0)

"""Occupation-probability model for photon pairs on two detector arrays.

A source emits a Poisson-distributed number of photon pairs per frame. Each
pair lands independently on detector modes ``(i, j)`` with probability
``P[i, j]``. For one pair of detectors this module computes the probability
that, given ``n`` emitted pairs,

* at least one pair occupies ``(i, j)``                          (``pair``)
* ``i`` and ``j`` are both occupied, but only by different pairs (``cross``)
* only ``i`` is occupied                                         (``photon_noise_ij``)
* only ``j`` is occupied                                         (``photon_noise_ji``)
* neither is occupied                                            (``none``)

and the averages of these over the pair-number distribution.

All conditional functions accept scalars or numpy arrays and broadcast.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import pdtrc

from .errors import DomainError

# Slack for comparisons between probabilities that come from sums of matrix
# entries (marginals) and individual entries.
_PROB_ATOL = 1e-12
_ZERO_CLAMP = 1e-14


def _as_prob(x, name):
    a = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(a)):
        raise DomainError(f"{name} must be finite")
    if np.any(a < -_PROB_ATOL) or np.any(a > 1 + _PROB_ATOL):
        raise DomainError(f"{name} must lie in [0, 1]")
    return np.clip(a, 0.0, 1.0)


def _as_count(n):
    a = np.asarray(n)
    if not np.issubdtype(a.dtype, np.integer):
        if not np.all(np.isfinite(a)) or np.any(a != np.floor(a)):
            raise DomainError("pair count n must be an integer")
        a = a.astype(np.int64)
    if np.any(a < 0):
        raise DomainError("pair count n must be non-negative")
    return a


def _scalarize(a):
    a = np.asarray(a)
    return float(a) if a.ndim == 0 else a.astype(float)


def _log1m(x):
    """log(1 - x) in extended precision; -inf at x == 1."""
    x = np.asarray(x, dtype=np.longdouble)
    with np.errstate(divide="ignore"):
        return np.log1p(-x)


def _em1(lg, n):
    """``(1 - x)**n - 1`` given ``lg = log(1 - x)``; exact zero at ``n == 0``."""
    if n == 0:
        return np.zeros(np.shape(lg), dtype=np.longdouble)
    return np.expm1(n * lg)


def pow1m(x, n):
    """Return ``(1 - x)**n`` evaluated as ``exp(n * log1p(-x))``."""
    x = _as_prob(x, "x")
    n = _as_count(n)
    lg = _log1m(x)
    with np.errstate(invalid="ignore"):
        prod = np.where(n == 0, np.longdouble(0), n * lg)
    return _scalarize(np.exp(prod))


def _check_triplet(p_i, p_j, p_ij):
    p_i = _as_prob(p_i, "P_i")
    p_j = _as_prob(p_j, "P_j")
    p_ij = _as_prob(p_ij, "P_ij")
    if np.any(p_ij > np.minimum(p_i, p_j) + _PROB_ATOL):
        raise DomainError("P_ij must not exceed min(P_i, P_j)")
    if np.any(p_i + p_j - p_ij > 1 + _PROB_ATOL):
        raise DomainError("P_i + P_j - P_ij must not exceed 1")
    p_ij = np.minimum(p_ij, np.minimum(p_i, p_j))
    return p_i, p_j, p_ij, np.clip(p_i + p_j - p_ij, 0.0, 1.0)


def _finish(r, what):
    r = np.asarray(r, dtype=float)
    if np.any(r < -_PROB_ATOL):
        raise ArithmeticError(f"{what} probability evaluated negative ({r.min():.3e})")
    r = np.where(np.abs(r) < _ZERO_CLAMP, 0.0, r)
    return _scalarize(np.clip(r, 0.0, 1.0))


class _Logs:
    """Extended-precision ``log(1 - x)`` of every probability the conditionals need."""

    def __init__(self, p_i, p_j, p_ij, union):
        self.ij = _log1m(p_ij)
        self.i = _log1m(p_i)
        self.j = _log1m(p_j)
        self.union = _log1m(union)
        # i-only = (1-P_j)^n * (1 - (1 - (P_i-P_ij)/(1-P_j))^n), free of cancellation
        self.only_i = self._ratio_log(p_i, p_j, p_ij)
        self.only_j = self._ratio_log(p_j, p_i, p_ij)
        self.ok_i = np.asarray(p_j) < 1
        self.ok_j = np.asarray(p_i) < 1

    @staticmethod
    def _ratio_log(p_first, p_other, p_ij):
        rest = np.longdouble(1) - np.asarray(p_other, dtype=np.longdouble)
        excl = np.asarray(p_first, dtype=np.longdouble) - np.asarray(p_ij, dtype=np.longdouble)
        safe = rest > 0
        ratio = np.clip(np.where(safe, excl / np.where(safe, rest, 1), 0), 0, 1)
        return _log1m(ratio)


def _raw_terms(logs: _Logs, n: int):
    """Five conditionals for ``n`` pairs as unclamped extended-precision arrays."""
    a = _em1(logs.ij, n)
    u = _em1(logs.union, n)
    b = _em1(logs.i, n)
    e = _em1(logs.j, n)
    pair = -a
    cross = a + u - b - e
    only_i = np.where(logs.ok_i, (e + 1) * -_em1(logs.only_i, n), 0)
    only_j = np.where(logs.ok_j, (b + 1) * -_em1(logs.only_j, n), 0)
    return pair, cross, only_i, only_j, u + 1


_TERM_NAMES = ("pair", "cross", "photon-noise (i)", "photon-noise (j)", "no-photon")


def _conditional(p_i, p_j, p_ij, n, index):
    p_i, p_j, p_ij, union = _check_triplet(p_i, p_j, p_ij)
    n = _as_count(n)
    logs = _Logs(p_i, p_j, p_ij, union)
    if n.ndim == 0:
        return _finish(_raw_terms(logs, int(n))[index], _TERM_NAMES[index])
    out = np.zeros(np.broadcast(p_i, p_j, p_ij, n).shape, dtype=np.longdouble)
    for k in np.unique(n):
        vals = np.broadcast_to(_raw_terms(logs, int(k))[index], out.shape)
        sel = np.broadcast_to(n == k, out.shape)
        out[sel] = vals[sel]
    return _finish(out, _TERM_NAMES[index])


def pair_conditional(p_ij, n):
    """Probability that at least one of ``n`` pairs occupies mode ``(i, j)``.

    Equals ``1 - (1 - p_ij)**n``, computed through ``expm1``/``log1p`` so that
    tiny ``p_ij`` with large ``n`` keeps full relative accuracy.
    """
    p_ij = _as_prob(p_ij, "P_ij")
    return _conditional(p_ij, p_ij, p_ij, n, 0)


def cross_conditional(p_i, p_j, p_ij, n):
    """Probability that ``i`` and ``j`` are occupied only by photons of different pairs.

    Closed form ``(1-P_ij)^n + (1-P_i-P_j+P_ij)^n - (1-P_i)^n - (1-P_j)^n``,
    with each power formed by ``expm1`` in extended precision before summing.
    """
    return _conditional(p_i, p_j, p_ij, n, 1)


def photon_noise_conditional(p_i, p_j, p_ij, n, direction="i"):
    """Probability that exactly one of the two modes is photon-occupied.

    ``direction="i"`` gives the probability that ``i`` is occupied and ``j`` is
    empty, ``(1-P_j)^n - (1-P_i-P_j+P_ij)^n``; ``direction="j"`` the mirror.
    """
    if direction in ("i", "i-occupied"):
        return _conditional(p_i, p_j, p_ij, n, 2)
    if direction in ("j", "j-occupied"):
        return _conditional(p_i, p_j, p_ij, n, 3)
    raise ValueError(f"direction must be 'i' or 'j', got {direction!r}")


def none_conditional(p_i, p_j, p_ij, n):
    """Probability that neither mode ``i`` nor ``j`` holds a photon: ``(1-P_i-P_j+P_ij)^n``."""
    return _conditional(p_i, p_j, p_ij, n, 4)


# --------------------------------------------------------------------------
# Model inputs


@dataclass(frozen=True, eq=False)
class JointDistribution:
    """Pair detection probabilities ``P[i, j]`` over two arrays of detectors.

    Parameters
    ----------
    p : array_like, shape (D1, D2)
        Probability that one emitted pair lands on detector ``i`` of the first
        array and ``j`` of the second. Must sum to one within 1e-9.
    renormalize : bool
        Accept matrices whose total deviates from one by less than 1e-6 and
        rescale them. Larger deviations are always rejected.
    """

    p: np.ndarray
    renormalize: bool = field(default=False, repr=False)
    marginal_i: np.ndarray = field(init=False, repr=False)
    marginal_j: np.ndarray = field(init=False, repr=False)

    SUM_TOL = 1e-9
    RENORM_TOL = 1e-6

    def __post_init__(self):
        p = np.array(self.p, dtype=float)
        if p.ndim != 2 or 0 in p.shape:
            raise DomainError("joint distribution must be a non-empty 2-D matrix")
        if not np.all(np.isfinite(p)):
            raise DomainError("joint distribution contains non-finite entries")
        if np.any(p < 0) or np.any(p > 1):
            raise DomainError("joint distribution entries must lie in [0, 1]")
        total = math.fsum(p.ravel())
        dev = abs(total - 1.0)
        if dev > self.SUM_TOL:
            if self.renormalize and dev < self.RENORM_TOL:
                p = p / total
            else:
                raise DomainError(
                    f"joint distribution is not normalized: entries sum to {total:.12g}"
                )
        p.setflags(write=False)
        mi = p.sum(axis=1)
        mj = p.sum(axis=0)
        mi.setflags(write=False)
        mj.setflags(write=False)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "marginal_i", mi)
        object.__setattr__(self, "marginal_j", mj)

    @property
    def dims(self) -> tuple[int, int]:
        return self.p.shape

    @property
    def is_square(self) -> bool:
        return self.p.shape[0] == self.p.shape[1]

    def peak(self) -> tuple[int, int]:
        """Index of the largest entry (first in row-major order on ties)."""
        i, j = np.unravel_index(int(np.argmax(self.p)), self.p.shape)
        return int(i), int(j)

    def cell(self, i: int, j: int) -> tuple[float, float, float]:
        """Return ``(P_i, P_j, P_ij)`` for one detector pair."""
        d1, d2 = self.dims
        if not (0 <= i < d1 and 0 <= j < d2):
            raise IndexError(f"cell ({i}, {j}) outside a {d1}x{d2} distribution")
        return float(self.marginal_i[i]), float(self.marginal_j[j]), float(self.p[i, j])


@dataclass(frozen=True)
class DetectorModel:
    """Per-pixel detection probability ``p_d`` and noise probability ``p_n``."""

    p_d: float
    p_n: float

    def __post_init__(self):
        for name in ("p_d", "p_n"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise DomainError(f"{name} must be finite")
        if not 0.0 <= self.p_d <= 1.0:
            raise DomainError("p_d must lie in [0, 1]")
        if not 0.0 <= self.p_n < 1.0:
            raise DomainError("p_n must lie in [0, 1)")


@dataclass(frozen=True)
class SourceModel:
    """Poissonian pair source with mean ``mu`` pairs per frame.

    ``truncation_tail`` bounds the Poisson mass discarded when an average over
    the pair number is truncated.
    """

    mu: float
    truncation_tail: float = 1e-12

    def __post_init__(self):
        if not math.isfinite(self.mu) or self.mu < 0:
            raise DomainError("mu must be finite and non-negative")
        if not 0 < self.truncation_tail < 1:
            raise DomainError("truncation_tail must lie in (0, 1)")

    @property
    def n_cap(self) -> int:
        return math.ceil(self.mu + 12.0 * math.sqrt(self.mu + 1.0) + 30.0)

    @property
    def n_max(self) -> int:
        """Smallest ``n`` whose upper tail mass is below ``truncation_tail``, capped."""
        if self.mu == 0:
            return 0
        cap = self.n_cap
        n = int(self.mu)
        while n < cap and pdtrc(n, self.mu) >= self.truncation_tail:
            n += 1
        return n

    def weights(self) -> np.ndarray:
        """Poisson weights ``P_0 .. P_nmax`` by upward recurrence."""
        n_max = self.n_max
        w = np.empty(n_max + 1)
        w[0] = math.exp(-self.mu)
        for n in range(n_max):
            w[n + 1] = w[n] * self.mu / (n + 1)
        return w


def poisson_average(f: Callable, source: SourceModel):
    """Average ``f(n)`` over the pair-number distribution of ``source``.

    ``f`` may return scalars or arrays; the sum runs from ``n = 0`` upward to the
    truncation index.
    """
    acc = None
    for n, w in enumerate(source.weights()):
        term = w * np.asarray(f(n), dtype=float)
        acc = term if acc is None else acc + term
    return _scalarize(acc)


@dataclass(frozen=True)
class OccupationProbabilities:
    """Poisson-averaged occupation probabilities for one pair of detectors.

    Fields may also be arrays when computed for many cells at once.
    """

    pair: float
    cross: float
    photon_noise_ij: float  # i occupied, j empty
    photon_noise_ji: float  # j occupied, i empty
    none: float

    def total(self):
        return self.pair + self.cross + self.photon_noise_ij + self.photon_noise_ji + self.none


def conditional_terms(p_i, p_j, p_ij, n) -> tuple:
    """All five conditionals for ``n`` pairs, in the order of OccupationProbabilities."""
    p_i, p_j, p_ij, union = _check_triplet(p_i, p_j, p_ij)
    n = int(_as_count(n))
    logs = _Logs(p_i, p_j, p_ij, union)
    return tuple(_finish(t, name) for t, name in zip(_raw_terms(logs, n), _TERM_NAMES))


def occupation_from_probs(p_i, p_j, p_ij, source: SourceModel) -> OccupationProbabilities:
    """Poisson-averaged occupation probabilities from per-pair probabilities.

    The arguments are the per-pair probabilities of a photon at ``i``, a photon
    at ``j`` and both photons at ``(i, j)``; they broadcast against each other.
    """
    p_i, p_j, p_ij, union = _check_triplet(p_i, p_j, p_ij)
    logs = _Logs(p_i, p_j, p_ij, union)
    shape = np.broadcast(p_i, p_j, p_ij).shape
    sums = [np.zeros(shape, dtype=np.longdouble) for _ in range(5)]
    for n, w in enumerate(source.weights()):
        w = np.longdouble(w)
        for acc, term in zip(sums, _raw_terms(logs, n)):
            acc += w * term
    return OccupationProbabilities(*(_finish(s, name) for s, name in zip(sums, _TERM_NAMES)))


def occupation(joint: JointDistribution, i: int, j: int, source: SourceModel) -> OccupationProbabilities:
    """Occupation probabilities of detector pair ``(i, j)`` under ``source``."""
    p_i, p_j, p_ij = joint.cell(i, j)
    return occupation_from_probs(p_i, p_j, p_ij, source)


def mean_events_per_pixel(mu_i: float, det: DetectorModel, approximate: bool = False) -> float:
    """Mean thresholded output of a pixel receiving ``mu_i`` photons on average.

    The exact value ``p_d*mu_i + p_n*(1 - p_d*mu_i)`` counts noise only when no
    photon was detected. ``approximate=True`` returns ``p_d*mu_i + p_n``.
    """
    if not math.isfinite(mu_i) or mu_i < 0:
        raise DomainError("mu_i must be finite and non-negative")
    x = det.p_d * mu_i
    if x > 1:
        raise DomainError("p_d * mu_i exceeds 1; the low-flux expression does not apply")
    if approximate:
        return x + det.p_n
    return x + det.p_n * (1.0 - x)


def populated_modes(joint: JointDistribution, source: SourceModel) -> float:
    """Mean number of detector modes holding at least one pair, summed over all cells."""
    if source.mu == 0:
        return 0.0
    pair = poisson_average(lambda n: pair_conditional(joint.p, n), source)
    return math.fsum(np.ravel(pair))

"""Analytic correlation functions, visibility and the optimal pair flux.

Two arrangements are supported:

``dual``
    signal photons on one array (index ``i``), idlers on another (``j``).
``single``
    both photons on the same array. A pixel then sees a photon if either the
    signal or the idler of a pair lands on it, coincidences are only formed
    between distinct pixels and the correlation matrix is symmetric.

Both cases go through the same occupation machinery. It is fed the per-pair
probabilities of a *detected* photon on each pixel and of a detected pair
on the cell, i.e. ``p_d*P_i``, ``p_d*P_j`` and ``p_d**2 * P_ij`` in the dual
case.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Union

import numpy as np

from .errors import BracketError, DomainError, UndefinedVisibilityError
from .model import (
    DetectorModel,
    JointDistribution,
    SourceModel,
    occupation_from_probs,
    pow1m,
)

ARRAY_MODES = ("dual", "single")
TERMS = ("pair", "cross", "photon_noise", "noise_noise")

MuLike = Union[float, SourceModel]


def _source(mu: MuLike, truncation_tail: float = 1e-12) -> SourceModel:
    if isinstance(mu, SourceModel):
        return mu
    return SourceModel(float(mu), truncation_tail)


def _check_mode(array_mode: str) -> str:
    if array_mode not in ARRAY_MODES:
        raise ValueError(f"array_mode must be one of {ARRAY_MODES}, got {array_mode!r}")
    return array_mode


@dataclass
class CorrelationResult:
    """Correlation matrix with its four-term decomposition.

    ``pair``, ``cross``, ``photon_noise`` and ``noise_noise`` are in the
    pre-normalization units of coincidence probability per frame; their sum is
    ``unnormalized`` and ``g2 = unnormalized / normalization_constant``.
    Monte Carlo estimates also carry binomial standard errors.
    """

    g2: np.ndarray
    unnormalized: np.ndarray
    pair: np.ndarray
    cross: np.ndarray
    photon_noise: np.ndarray
    noise_noise: np.ndarray
    normalization_constant: float
    array_mode: str = "dual"
    standard_error: Optional[np.ndarray] = None
    raw_standard_error: Optional[np.ndarray] = None
    n_frames: Optional[int] = None

    @classmethod
    def from_terms(cls, pair, cross, photon_noise, noise_noise, array_mode="dual", **extra):
        total = pair + cross + photon_noise + noise_noise
        norm = math.fsum(np.ravel(total))
        g2 = total / norm if norm > 0 else np.zeros_like(total)
        return cls(g2, total, pair, cross, photon_noise, noise_noise, norm, array_mode, **extra)

    @property
    def decomposition(self) -> dict:
        return {name: getattr(self, name) for name in TERMS}

    def fractions(self, mask: Optional[np.ndarray] = None) -> dict:
        """Share of each term in the total, optionally restricted to ``mask`` cells."""
        sel = (lambda a: a[mask]) if mask is not None else np.ravel
        total = math.fsum(sel(self.unnormalized))
        return {name: math.fsum(sel(getattr(self, name))) / total for name in TERMS}


@dataclass
class VisibilityCurve:
    """Visibility sampled over a grid of mean pair numbers.

    ``detected`` holds ``p_d * mu``, the mean number of detected photons per
    array and per source photon. ``optimum`` is ``(mu, V)`` at the best sample
    unless it was refined by an optimizer.
    """

    mu: np.ndarray
    detected: np.ndarray
    visibility: np.ndarray
    optimum: tuple = field(default=(math.nan, math.nan))

    @property
    def samples(self) -> list:
        return list(zip(self.detected.tolist(), self.visibility.tolist()))


# --------------------------------------------------------------------------
# Per-pair detection probabilities


def effective_probabilities(joint: JointDistribution, det: DetectorModel, array_mode: str = "dual"):
    """Per-pair probabilities of a detected photon at ``i``, at ``j`` and of a detected pair.

    Returns arrays broadcastable to ``joint.dims`` and, for single-array mode,
    a boolean mask of the diagonal (cells that never register a coincidence).
    """
    _check_mode(array_mode)
    pd = det.p_d
    if array_mode == "dual":
        ei = pd * joint.marginal_i[:, None]
        ej = pd * joint.marginal_j[None, :]
        return ei, ej, pd * pd * joint.p, None
    if not joint.is_square:
        raise DomainError(f"single-array mode needs a square distribution, got {joint.dims}")
    p = joint.p
    diag = np.diag(p)
    # a pixel holds a detected photon if the signal or the idler lands on it
    m = pd * (joint.marginal_i + joint.marginal_j) - pd * pd * diag
    m = np.clip(m, 0.0, 1.0)
    eij = pd * pd * (p + p.T)
    mask = np.eye(p.shape[0], dtype=bool)
    eij = np.where(mask, 0.0, eij)
    eij = np.minimum(eij, np.minimum(m[:, None], m[None, :]))
    return m[:, None], m[None, :], eij, mask


def _cell_effective(joint, det, i, j, array_mode):
    d1, d2 = joint.dims
    if not (0 <= i < d1 and 0 <= j < d2):
        raise IndexError(f"cell ({i}, {j}) outside a {d1}x{d2} distribution")
    ei, ej, eij, mask = effective_probabilities(joint, det, array_mode)
    if mask is not None and i == j:
        raise DomainError("single-array mode has no coincidences on the diagonal")
    return float(ei[i, 0]), float(ej[0, j]), float(eij[i, j])


def _default_cell(joint, i, j, array_mode):
    if i is not None and j is not None:
        return int(i), int(j)
    if array_mode == "single":
        p = joint.p + joint.p.T
        p = np.where(np.eye(p.shape[0], dtype=bool), -1.0, p)
        a, b = np.unravel_index(int(np.argmax(p)), p.shape)
        return int(a), int(b)
    return joint.peak()


def _unique_cells(ei, ej, eij):
    """Collapse a matrix of probability triples to its distinct rows."""
    shape = np.broadcast(ei, ej, eij).shape
    triples = np.stack([np.broadcast_to(a, shape).ravel() for a in (ei, ej, eij)], axis=1)
    uniq, inverse = np.unique(triples, axis=0, return_inverse=True)
    return shape, uniq, inverse.ravel()


def _exact_terms(ei, ej, eij, p_n, source):
    shape, uniq, inverse = _unique_cells(ei, ej, eij)
    occ = occupation_from_probs(uniq[:, 0], uniq[:, 1], uniq[:, 2], source)
    pair = np.asarray(occ.pair)
    cross = np.asarray(occ.cross)
    ph = p_n * (np.asarray(occ.photon_noise_ij) + np.asarray(occ.photon_noise_ji))
    nn = p_n * p_n * np.asarray(occ.none)
    return tuple(t[inverse].reshape(shape) for t in (pair, cross, ph, nn))


def _quadratic_terms(ei, ej, eij, p_n, mu):
    shape = np.broadcast(ei, ej, eij).shape
    pair = mu * eij
    cross = mu * mu * (ei - eij) * (ej - eij)
    ph = mu * p_n * ((ei - eij) + (ej - eij))
    nn = np.full(shape, p_n * p_n)
    return tuple(np.broadcast_to(t, shape).astype(float) for t in (pair, cross, ph, nn))


def _result(terms, mask, array_mode):
    if mask is not None:
        terms = tuple(np.where(mask, 0.0, t) for t in terms)
    return CorrelationResult.from_terms(*terms, array_mode=array_mode)


def g2_exact(
    joint: JointDistribution,
    det: DetectorModel,
    source: MuLike,
    array_mode: str = "dual",
) -> CorrelationResult:
    """Exact Poisson-averaged correlation matrix and its decomposition.

    Each cell holds the probability per frame that both detectors fire,
    split into pair, cross, photon-noise and noise-noise contributions.
    """
    source = _source(source)
    ei, ej, eij, mask = effective_probabilities(joint, det, array_mode)
    return _result(_exact_terms(ei, ej, eij, det.p_n, source), mask, array_mode)


def g2_quadratic(
    joint: JointDistribution,
    det: DetectorModel,
    mu: MuLike,
    array_mode: str = "dual",
) -> CorrelationResult:
    """Low-flux approximation of :func:`g2_exact`, term by term.

    Valid while the mean number of pairs is small against the number of
    occupied modes; the terms overestimate the exact ones as ``mu`` grows.
    """
    mu = _source(mu).mu
    ei, ej, eij, mask = effective_probabilities(joint, det, array_mode)
    return _result(_quadratic_terms(ei, ej, eij, det.p_n, mu), mask, array_mode)


def background_g2(
    joint: JointDistribution,
    det: DetectorModel,
    mu: MuLike,
    method: str = "exact",
    array_mode: str = "dual",
) -> CorrelationResult:
    """Reference correlation of an uncorrelated source with the same marginals."""
    ei, ej, eij, mask = effective_probabilities(joint, det, array_mode)
    zero = np.zeros(np.broadcast(ei, ej, eij).shape)
    if method == "exact":
        terms = _exact_terms(ei, ej, zero, det.p_n, _source(mu))
    elif method == "quadratic":
        terms = _quadratic_terms(ei, ej, zero, det.p_n, _source(mu).mu)
    else:
        raise ValueError(f"method must be 'exact' or 'quadratic', got {method!r}")
    return _result(terms, mask, array_mode)


def visibility(g2_value: float, g2_background_value: float) -> float:
    """Contrast ``(G - Gb) / (G + Gb)`` of a correlation value against its background."""
    g, b = float(g2_value), float(g2_background_value)
    if g < 0 or b < 0 or not (math.isfinite(g) and math.isfinite(b)):
        raise DomainError("correlation values must be finite and non-negative")
    if g == 0 and b == 0:
        raise UndefinedVisibilityError("visibility undefined: peak and background are both zero")
    return (g - b) / (g + b)


def visibility_exact(
    joint: JointDistribution,
    det: DetectorModel,
    mu: MuLike,
    i: Optional[int] = None,
    j: Optional[int] = None,
    array_mode: str = "dual",
) -> float:
    """Exact visibility of cell ``(i, j)``; defaults to the peak of the joint distribution."""
    _check_mode(array_mode)
    i, j = _default_cell(joint, i, j, array_mode)
    ei, ej, eij = _cell_effective(joint, det, i, j, array_mode)
    src = _source(mu)
    pk = _exact_terms(np.array(ei), np.array(ej), np.array(eij), det.p_n, src)
    bg = _exact_terms(np.array(ei), np.array(ej), np.array(0.0), det.p_n, src)
    return visibility(math.fsum(float(t) for t in pk), math.fsum(float(t) for t in bg))


def visibility_quadratic(
    joint: JointDistribution,
    det: DetectorModel,
    mu: MuLike,
    i: Optional[int] = None,
    j: Optional[int] = None,
    array_mode: str = "dual",
) -> float:
    """Closed-form visibility of the low-flux correlation at cell ``(i, j)``."""
    _check_mode(array_mode)
    mu = _source(mu).mu
    i, j = _default_cell(joint, i, j, array_mode)
    a, b, c = _cell_effective(joint, det, i, j, array_mode)
    pn = det.p_n
    num = mu * c * (1.0 - mu * (a + b - c) - 2.0 * pn)
    den = num + 2.0 * mu * mu * a * b + 2.0 * mu * pn * (a + b) + 2.0 * pn * pn
    if num == 0 and den == 0:
        raise UndefinedVisibilityError("visibility undefined: peak and background are both zero")
    return num / den


def visibility_curve(
    joint: JointDistribution,
    det: DetectorModel,
    mu_grid: Iterable[float],
    method: str = "exact",
    i: Optional[int] = None,
    j: Optional[int] = None,
    array_mode: str = "dual",
) -> VisibilityCurve:
    funcs = {"exact": visibility_exact, "quadratic": visibility_quadratic}
    if method not in funcs:
        raise ValueError(f"method must be 'exact' or 'quadratic', got {method!r}")
    mu = np.asarray(list(mu_grid), dtype=float)
    v = np.array([funcs[method](joint, det, m, i, j, array_mode) for m in mu])
    k = int(np.argmax(v))
    return VisibilityCurve(mu, det.p_d * mu, v, (float(mu[k]), float(v[k])))


def mean_events_per_frame(
    joint: JointDistribution,
    det: DetectorModel,
    source: MuLike,
    array_mode: str = "dual",
) -> float:
    """Expected events (photo-detections plus noise) per frame on the first array.

    A pixel fires unless it holds no detected photon and no noise event, so
    its mean output is ``1 - (1 - p_n) * sum_n P_n (1 - m)^n`` where ``m`` is
    the per-pair probability of a detected photon on it.
    """
    source = _source(source)
    ei, _, _, _ = effective_probabilities(joint, det, array_mode)
    m = np.ravel(ei)
    dark = np.zeros_like(m)
    for n, w in enumerate(source.weights()):
        dark += w * pow1m(m, n)
    return math.fsum(1.0 - (1.0 - det.p_n) * dark)


# --------------------------------------------------------------------------
# Optimal flux


def optimal_mu_approx(
    joint: JointDistribution,
    det: DetectorModel,
    i: Optional[int] = None,
    j: Optional[int] = None,
    array_mode: str = "dual",
) -> float:
    """Mean pair number at which detected photons on ``i`` and ``j`` match the noise.

    Dual arrays: ``p_n / (p_d * sqrt(P_i * P_j))``. A single array needs half
    of that because each pixel collects both photons of a pair.
    """
    _check_mode(array_mode)
    i, j = _default_cell(joint, i, j, array_mode)
    p_i, p_j, _ = joint.cell(i, j)
    if p_i * p_j == 0:
        raise DomainError(f"marginal probability vanishes at cell ({i}, {j})")
    if det.p_d == 0:
        raise DomainError("p_d must be positive for an optimal flux to exist")
    dual = det.p_n / (det.p_d * math.sqrt(p_i * p_j))
    return dual if array_mode == "dual" else 0.5 * dual


_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def golden_section_max(f: Callable[[float], float], a: float, b: float, rtol: float = 1e-4):
    """Maximize a unimodal ``f`` on ``[a, b]``; stops when the interval is ``rtol`` of its midpoint."""
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    while (b - a) > rtol * 0.5 * abs(a + b):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    return x, f(x)


def optimal_mu_exact(
    joint: JointDistribution,
    det: DetectorModel,
    i: Optional[int] = None,
    j: Optional[int] = None,
    array_mode: str = "dual",
    bracket: Optional[tuple] = None,
    rtol: float = 1e-4,
    n_scan: int = 41,
) -> tuple:
    """Mean pair number maximizing the exact visibility, and that visibility.

    The bracket (default ``[1e-4, 10*mu_approx + 1]``) is scanned on a grid
    first. A maximum at the lower end of a monotone decreasing curve is
    returned as is (the noiseless case); a maximum at the upper end or more
    than one peak raises :class:`BracketError`.
    """
    _check_mode(array_mode)
    i, j = _default_cell(joint, i, j, array_mode)
    if bracket is None:
        hi = 1.0
        if det.p_n > 0:
            hi = 10.0 * optimal_mu_approx(joint, det, i, j, array_mode) + 1.0
        bracket = (1e-4, hi)
    lo, hi = map(float, bracket)
    if not (0 <= lo < hi):
        raise BracketError(f"invalid bracket ({lo}, {hi})")

    def vis(mu):
        return visibility_exact(joint, det, mu, i, j, array_mode)

    grid = np.linspace(lo, hi, n_scan)
    v = np.array([vis(m) for m in grid])
    k = int(np.argmax(v))
    slack = 1e-12 * max(1.0, float(np.max(np.abs(v))))
    dv = np.diff(v)
    if np.any(dv[:k] < -slack) or np.any(dv[k:] > slack):
        raise BracketError("visibility is not unimodal on the bracket")
    if k == n_scan - 1:
        raise BracketError("visibility still rising at the upper end of the bracket")
    if k == 0:
        return lo, float(v[0])
    return golden_section_max(vis, float(grid[k - 1]), float(grid[k + 1]), rtol)


# --------------------------------------------------------------------------
# Reductions


@dataclass
class ReducedCurve:
    """Correlation summed along lines of constant index (or angle-bin) difference.

    ``values[k]`` is the sum over all cells with offset ``k``; ``counts[k]`` is
    the number of such cells, so ``mean`` gives the per-cell average.
    """

    offsets: np.ndarray
    values: np.ndarray
    counts: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.counts > 0, self.values / np.maximum(self.counts, 1), np.nan)


def diagonal_reduce(
    result,
    variable: str = "difference",
    labels: Optional[np.ndarray] = None,
    n_bins: Optional[int] = None,
    exclude_diagonal: bool = False,
) -> ReducedCurve:
    """Reduce a square correlation matrix to a curve over ``i - j``.

    ``variable="difference"`` uses ``(i - j) mod D``. ``variable="angle"``
    uses ``(labels[i] - labels[j]) mod n_bins`` where ``labels`` assigns an
    angular bin to every pixel.
    """
    g = result.g2 if isinstance(result, CorrelationResult) else np.asarray(result, dtype=float)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise DomainError(f"diagonal reduction needs a square matrix, got shape {g.shape}")
    d = g.shape[0]
    idx = np.arange(d)
    if variable == "difference":
        off = (idx[:, None] - idx[None, :]) % d
        n_off = d
    elif variable == "angle":
        if labels is None or n_bins is None:
            raise ValueError("angle reduction needs pixel bin labels and n_bins")
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (d,):
            raise DomainError("one bin label per pixel is required")
        off = (labels[:, None] - labels[None, :]) % n_bins
        n_off = int(n_bins)
    else:
        raise ValueError(f"variable must be 'difference' or 'angle', got {variable!r}")
    keep = np.ones((d, d), dtype=bool)
    if exclude_diagonal:
        keep[idx, idx] = False
    values = np.bincount(off[keep], weights=g[keep], minlength=n_off)
    counts = np.bincount(off[keep], minlength=n_off)
    return ReducedCurve(np.arange(n_off), values, counts)

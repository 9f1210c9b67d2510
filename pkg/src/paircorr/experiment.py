"""Concrete scenarios: the banded example state and the far-field annulus.

Also the sweep drivers behind the two figure replications: analytic
visibility curves for the example state, and single-array Monte Carlo runs
on the annulus.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import brentq

from . import analytic
from .analytic import diagonal_reduce, g2_exact, visibility_exact, visibility_quadratic
from .errors import DomainError
from .model import DetectorModel, JointDistribution, SourceModel
from .montecarlo import RunConfig, simulate

FIG3_P_N = (0.01, 0.02, 0.05, 0.1)
FIG4_P_N = 6.2 / 660
FIG4_MU = (0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 10.0, 12.0, 15.0, 20.0, 28.0, 36.0)


@dataclass(frozen=True)
class ExampleStateSpec:
    D: int = 50
    c: float = 0.6


def build_example_state(spec: ExampleStateSpec) -> JointDistribution:
    """Banded state: weight ``c`` on ``i == j`` and ``(1-c)/2`` on each neighbour, cyclically.

    Every row and column sums to ``1/D``.
    """
    D, c = int(spec.D), float(spec.c)
    if D < 2:
        raise DomainError("example state needs D >= 2")
    if not 0.0 <= c <= 1.0:
        raise DomainError("correlation weight c must lie in [0, 1]")
    idx = np.arange(D)
    coeff = np.zeros((D, D))
    coeff[idx, idx] += c
    side = (1.0 - c) / 2.0
    coeff[(idx + 1) % D, idx] += side
    coeff[idx, (idx + 1) % D] += side
    return JointDistribution(coeff / D)


@dataclass
class AnnularGeometry:
    """Pixels of a ring-shaped region of interest and their angular bins.

    Pixel coordinates are integer offsets from the ring centre; a pixel
    belongs to the ring when ``inner <= r < outer``.
    """

    inner_radius: float
    outer_radius: float
    bin_width: float
    x: np.ndarray
    y: np.ndarray
    r: np.ndarray
    theta: np.ndarray  # degrees in [0, 360)
    bins: np.ndarray
    n_bins: int

    @property
    def n_pixels(self) -> int:
        return int(self.x.size)

    @property
    def bin_counts(self) -> np.ndarray:
        return np.bincount(self.bins, minlength=self.n_bins)

    def opposite_bin(self, b):
        return (np.asarray(b) + self.n_bins // 2) % self.n_bins


def build_annulus(inner: float, outer: float, bin_width: float = 2.0) -> AnnularGeometry:
    if not 0 < inner < outer:
        raise DomainError("annulus needs 0 < inner < outer")
    n_bins = 360.0 / bin_width
    if bin_width <= 0 or abs(n_bins - round(n_bins)) > 1e-9:
        raise DomainError("bin width must divide 360 degrees")
    n_bins = int(round(n_bins))
    if n_bins % 2:
        raise DomainError("an even number of angular bins is needed to pair opposite angles")
    span = int(math.ceil(outer))
    g = np.arange(-span, span + 1)
    X, Y = np.meshgrid(g, g, indexing="xy")
    R = np.hypot(X, Y)
    sel = (R >= inner) & (R < outer)
    x, y, r = X[sel], Y[sel], R[sel]
    if x.size == 0:
        raise DomainError("annulus contains no pixel centres")
    # rounding keeps exact multiples of the bin width (axes) on a stable side
    theta = np.round(np.degrees(np.arctan2(y, x)) % 360.0, 9) % 360.0
    bins = np.floor(theta / bin_width + 1e-12).astype(np.int64) % n_bins
    return AnnularGeometry(inner, outer, bin_width, x, y, r, theta, bins, n_bins)


def build_annular_joint(geom: AnnularGeometry) -> JointDistribution:
    """Pair distribution on the ring pixels with anti-correlated angles.

    The signal pixel is uniform over the ring; the idler is uniform over the
    pixels of the diametrically opposite angular bin, at any radius.
    """
    counts = geom.bin_counts
    opp = geom.opposite_bin(geom.bins)
    if np.any(counts[opp] == 0):
        raise DomainError("some ring pixels face an empty angular bin")
    m = geom.n_pixels
    same = opp[:, None] == geom.bins[None, :]
    p = np.where(same, 1.0 / (m * counts[opp][:, None]), 0.0)
    return JointDistribution(p, renormalize=True)


def angular_visibility(curve: np.ndarray, n_bins: int, window: int = 2) -> float:
    """Visibility of the ``n_bins/2`` (180 degree) bin of a per-pair mean curve.

    The background is the mean over bins more than ``window`` bins from the peak.
    """
    curve = np.asarray(curve, dtype=float)
    peak = n_bins // 2
    dist = np.abs((np.arange(n_bins) - peak + n_bins // 2) % n_bins - n_bins // 2)
    bg = curve[(dist > window) & np.isfinite(curve)]
    return analytic.visibility(curve[peak], float(bg.mean()))


# --------------------------------------------------------------------------
# Figure 3: analytic sweep on the example state


@dataclass
class Fig3Result:
    curves: list = field(default_factory=list)  # dict rows
    optima: list = field(default_factory=list)
    decomposition: list = field(default_factory=list)


def _decomposition_rows(joint, det, mu, panel, p_n):
    res = g2_exact(joint, det, mu)
    D = joint.dims[0]
    rows = []
    reduced = {t: diagonal_reduce(getattr(res, t) / res.normalization_constant).values for t in analytic.TERMS}
    for k in range(D):
        off = k if k <= D // 2 else k - D
        row = {"panel": panel, "p_n": p_n, "mu": mu, "offset": off}
        row.update({t: float(reduced[t][k]) for t in analytic.TERMS})
        rows.append(row)
    rows.sort(key=lambda r: r["offset"])
    return rows


def _mu_with_visibility(joint, det, target, lo, hi_start):
    hi = hi_start
    while visibility_exact(joint, det, hi) > target:
        hi *= 2.0
        if hi > 1e6:
            raise DomainError("no flux above the optimum reaches the requested visibility")
    return brentq(lambda m: visibility_exact(joint, det, m) - target, lo, hi, xtol=1e-10)


def replicate_fig3(
    p_n_list: Sequence[float] = FIG3_P_N,
    p_d: float = 0.5,
    spec: ExampleStateSpec = ExampleStateSpec(),
    mu_grid: Optional[Sequence[float]] = None,
) -> Fig3Result:
    """Visibility against ``p_d*mu`` for several noise levels, with term breakdowns.

    For every ``p_n``: exact and quadratic visibility on ``mu_grid``, the exact
    and approximate optimum, and the reduced decomposition at the optimum. For
    the first ``p_n`` the decomposition is also given at a quarter of the
    optimum and at the flux above the optimum with the same visibility.
    """
    joint = build_example_state(spec)
    if mu_grid is None:
        mu_grid = np.round(np.arange(0.05, 10.0 + 1e-9, 0.05) / p_d, 10)
    mu_grid = [float(m) for m in mu_grid]
    out = Fig3Result()
    for k, p_n in enumerate(p_n_list):
        det = DetectorModel(p_d, p_n)
        for mu in mu_grid:
            out.curves.append({
                "p_n": p_n,
                "mu": mu,
                "detected": p_d * mu,
                "visibility_exact": visibility_exact(joint, det, mu),
                "visibility_quadratic": visibility_quadratic(joint, det, mu),
            })
        mu_opt, v_max = analytic.optimal_mu_exact(joint, det)
        mu_apx = analytic.optimal_mu_approx(joint, det) if p_n > 0 else 0.0
        out.optima.append({
            "p_n": p_n, "mu_opt_exact": mu_opt, "v_max": v_max,
            "mu_opt_approx": mu_apx, "v_at_approx": visibility_exact(joint, det, mu_apx) if mu_apx > 0 else v_max,
        })
        out.decomposition += _decomposition_rows(joint, det, mu_opt, "optimum", p_n)
        if k == 0 and p_n > 0:
            low = mu_opt / 4.0
            high = _mu_with_visibility(joint, det, visibility_exact(joint, det, low), mu_opt, 2.0 * mu_opt)
            out.decomposition += _decomposition_rows(joint, det, low, "below", p_n)
            out.decomposition += _decomposition_rows(joint, det, high, "above", p_n)
    return out


# --------------------------------------------------------------------------
# Figure 4: single-array Monte Carlo on the annulus


@dataclass(frozen=True)
class Fig4Point:
    mu: float
    p_n: float
    label: str = ""


def fig4_points(fluxes: dict, exposures: dict, p_n_by_exposure: dict) -> list:
    """Sweep points from pump settings and exposure labels.

    ``fluxes`` maps a pump label to pairs per unit time, ``exposures`` maps an
    exposure label to its duration and ``p_n_by_exposure`` gives the noise
    probability measured at each exposure. The source only sees the product
    ``mu = flux * exposure``.
    """
    pts = []
    for fl, rate in fluxes.items():
        for ex, tau in exposures.items():
            pts.append(Fig4Point(rate * tau, p_n_by_exposure[ex], f"{fl}/{ex}"))
    return pts


@dataclass
class Fig4Result:
    rows: list = field(default_factory=list)
    curves: dict = field(default_factory=dict)  # label -> per-pair mean curve
    n_pixels: int = 0
    n_bins: int = 0

    def peak(self) -> dict:
        """Row with the highest Monte Carlo visibility."""
        return max(self.rows, key=lambda r: r["visibility_mc"])


def replicate_fig4(
    geom: AnnularGeometry,
    det: DetectorModel,
    mu_grid: Optional[Sequence[float]] = FIG4_MU,
    n_frames: int = 2000,
    seed: int = 1,
    workers: int = 1,
    points: Optional[Sequence[Fig4Point]] = None,
    window: int = 2,
    with_exact: bool = True,
) -> Fig4Result:
    """Monte Carlo visibility of the angular correlation against mean events per frame.

    Coincidences are accumulated per pixel pair, reduced by the difference of
    angular bins and averaged per pixel pair; the visibility is that of the
    180 degree bin against the flat remainder. Each point uses its own seed
    derived from ``seed`` and its index.
    """
    joint = build_annular_joint(geom)
    if points is None:
        points = [Fig4Point(float(m), det.p_n, f"mu={m:g}") for m in mu_grid]
    out = Fig4Result(n_pixels=geom.n_pixels, n_bins=geom.n_bins)
    for k, pt in enumerate(points):
        d = DetectorModel(det.p_d, pt.p_n)
        src = SourceModel(pt.mu)
        cfg = RunConfig(seed=(seed + k * 0x9E3779B97F4A7C15) % 2**64, n_frames=n_frames,
                        array_mode="single", workers=workers)
        acc = simulate(joint, d, src, cfg)
        red = diagonal_reduce(acc.c.astype(float), "angle", geom.bins, geom.n_bins, exclude_diagonal=True)
        curve = red.mean
        row = {
            "label": pt.label,
            "mu": pt.mu,
            "p_n": pt.p_n,
            "detected_photons": 2.0 * d.p_d * pt.mu,
            "mean_events": float(acc.events_per_frame[0]),
            "visibility_mc": angular_visibility(curve, geom.n_bins, window),
            "coincidences": int(acc.c.sum()),
        }
        if with_exact:
            res = g2_exact(joint, d, src, "single")
            ex = diagonal_reduce(res.unnormalized, "angle", geom.bins, geom.n_bins, exclude_diagonal=True)
            row["expected_events"] = analytic.mean_events_per_frame(joint, d, src, "single")
            row["visibility_exact"] = angular_visibility(ex.mean, geom.n_bins, window)
        out.rows.append(row)
        out.curves[pt.label] = (red.offsets * geom.bin_width, curve, red.counts)
    return out

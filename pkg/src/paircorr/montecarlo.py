"""Monte Carlo frame sampling and coincidence accumulation.

Frames are generated in fixed-size blocks. Block ``b`` draws from its own
counter-based Philox stream keyed by ``(seed, b)``, so a run is reproducible
bit for bit whatever the number of worker threads. Per-block accumulators
hold integer counts and are merged by addition.
"""
from __future__ import annotations

import enum
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Optional

import numpy as np

from .analytic import CorrelationResult, _check_mode
from .errors import DomainError, EmptyAccumulatorError
from .model import DetectorModel, JointDistribution, SourceModel

TAGS = ("pair", "cross", "noise_photon", "noise_noise")


class PixelTruth(enum.IntEnum):
    DARK = 0
    PHOTON = 1
    NOISE = 2


@dataclass
class Frame:
    """Thresholded outputs of one exposure.

    ``outputs_b`` is ``None`` in single-array mode. When ground truth is
    recorded, ``truth_a``/``truth_b`` hold a :class:`PixelTruth` per pixel and
    ``detected_pairs`` lists the ``(i, j)`` cells of pairs whose two photons
    were both detected.
    """

    outputs_a: np.ndarray
    outputs_b: Optional[np.ndarray] = None
    truth_a: Optional[np.ndarray] = None
    truth_b: Optional[np.ndarray] = None
    detected_pairs: Optional[np.ndarray] = None


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    n_frames: int = 100_000
    array_mode: str = "dual"
    tagging: bool = False
    workers: int = 1
    block_size: int = 4096

    def __post_init__(self):
        _check_mode(self.array_mode)
        if not 0 <= self.seed < 2**64:
            raise DomainError("seed must be an unsigned 64-bit integer")
        if self.n_frames < 0:
            raise DomainError("n_frames must be non-negative")
        if self.workers < 1 or self.block_size < 1:
            raise DomainError("workers and block_size must be positive")

    @property
    def n_blocks(self) -> int:
        return -(-self.n_frames // self.block_size)


def block_rng(seed: int, block: int) -> np.random.Generator:
    """Independent random stream for one block of frames."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(block,))
    return np.random.Generator(np.random.Philox(ss))


# --------------------------------------------------------------------------
# Sampling


@dataclass
class FrameBlock:
    """Boolean photon/noise maps for a batch of frames (rows are frames)."""

    photon_a: np.ndarray
    noise_a: np.ndarray
    photon_b: Optional[np.ndarray]
    noise_b: Optional[np.ndarray]
    pairs: np.ndarray  # (k, 3) rows of (frame, i, j) for fully detected pairs

    @property
    def n_frames(self) -> int:
        return self.photon_a.shape[0]

    @property
    def outputs_a(self) -> np.ndarray:
        return self.photon_a | self.noise_a

    @property
    def outputs_b(self) -> Optional[np.ndarray]:
        return None if self.photon_b is None else self.photon_b | self.noise_b

    def frame(self, k: int, truth: bool = True) -> Frame:
        def tag(ph, nz):
            t = np.zeros(ph.shape[1], dtype=np.uint8)
            t[ph[k]] = PixelTruth.PHOTON
            t[nz[k]] = PixelTruth.NOISE
            return t

        out_b = None if self.photon_b is None else self.outputs_b[k].astype(np.uint8)
        fr = Frame(self.outputs_a[k].astype(np.uint8), out_b)
        if truth:
            fr.truth_a = tag(self.photon_a, self.noise_a)
            if self.photon_b is not None:
                fr.truth_b = tag(self.photon_b, self.noise_b)
            fr.detected_pairs = self.pairs[self.pairs[:, 0] == k, 1:].copy()
        return fr


def sample_block(
    joint: JointDistribution,
    det: DetectorModel,
    source: SourceModel,
    rng: np.random.Generator,
    n_frames: int,
    array_mode: str = "dual",
) -> FrameBlock:
    """Sample ``n_frames`` frames.

    Per frame: a Poisson number of pairs, each placed on a cell drawn from the
    joint distribution; each photon is detected with probability ``p_d``;
    pixels then saturate at one event; finally every pixel without a
    photo-detection fires a noise event with probability ``p_n``.
    """
    _check_mode(array_mode)
    d1, d2 = joint.dims
    if array_mode == "single" and d1 != d2:
        raise DomainError(f"single-array mode needs a square distribution, got {joint.dims}")
    counts = rng.poisson(source.mu, n_frames)
    total = int(counts.sum())
    frame_of = np.repeat(np.arange(n_frames), counts)
    cells = rng.choice(d1 * d2, size=total, p=joint.p.ravel()) if total else np.zeros(0, np.int64)
    i, j = np.divmod(cells, d2)
    det_s = rng.random(total) < det.p_d
    det_i = rng.random(total) < det.p_d

    photon_a = np.zeros((n_frames, d1), dtype=bool)
    photon_a[frame_of[det_s], i[det_s]] = True
    if array_mode == "dual":
        photon_b = np.zeros((n_frames, d2), dtype=bool)
        photon_b[frame_of[det_i], j[det_i]] = True
    else:
        photon_a[frame_of[det_i], j[det_i]] = True
        photon_b = None

    noise_a = (rng.random((n_frames, d1)) < det.p_n) & ~photon_a
    noise_b = None
    if array_mode == "dual":
        noise_b = (rng.random((n_frames, d2)) < det.p_n) & ~photon_b

    both = det_s & det_i
    pairs = np.stack([frame_of[both], i[both], j[both]], axis=1).astype(np.int64)
    return FrameBlock(photon_a, noise_a, photon_b, noise_b, pairs.reshape(-1, 3))


def sample_frame(
    joint: JointDistribution,
    det: DetectorModel,
    source: SourceModel,
    rng: np.random.Generator,
    array_mode: str = "dual",
) -> Frame:
    """Sample one frame, with ground truth attached."""
    return sample_block(joint, det, source, rng, 1, array_mode).frame(0)


# --------------------------------------------------------------------------
# Accumulation


@dataclass
class CoincidenceAccumulator:
    """Running coincidence counts ``C[i, j]`` and per-pixel event tallies.

    ``tagged`` maps each of :data:`TAGS` to a count matrix when tagging is on.
    ``block_totals`` keeps one row per merged block,
    ``(frames, total, pair, cross, noise_photon, noise_noise)``, which gives
    batch-means error bars on global ratios.
    """

    c: np.ndarray
    array_mode: str = "dual"
    n_frames: int = 0
    tagged: Optional[dict] = None
    pixel_counts_a: Optional[np.ndarray] = None
    pixel_counts_b: Optional[np.ndarray] = None
    block_totals: list = field(default_factory=list)

    @classmethod
    def empty(cls, dims, array_mode="dual", tagging=False):
        d1, d2 = dims
        tagged = {t: np.zeros((d1, d2), np.int64) for t in TAGS} if tagging else None
        return cls(
            np.zeros((d1, d2), np.int64),
            array_mode,
            0,
            tagged,
            np.zeros(d1, np.int64),
            np.zeros(d2, np.int64) if array_mode == "dual" else None,
        )

    @property
    def events_per_frame(self) -> tuple:
        """Mean number of events per frame on each array (``None`` for a missing array)."""
        if self.n_frames == 0:
            return (math.nan, None if self.pixel_counts_b is None else math.nan)
        a = self.pixel_counts_a.sum() / self.n_frames
        b = None if self.pixel_counts_b is None else self.pixel_counts_b.sum() / self.n_frames
        return (a, b)

    def merge(self, other: "CoincidenceAccumulator") -> "CoincidenceAccumulator":
        if self.c.shape != other.c.shape or self.array_mode != other.array_mode:
            raise DomainError("cannot merge accumulators of different shape or mode")
        self.c += other.c
        self.n_frames += other.n_frames
        if self.tagged is not None:
            if other.tagged is None:
                raise DomainError("cannot merge an untagged accumulator into a tagged one")
            for t in TAGS:
                self.tagged[t] += other.tagged[t]
        self.pixel_counts_a += other.pixel_counts_a
        if self.pixel_counts_b is not None:
            self.pixel_counts_b += other.pixel_counts_b
        self.block_totals.extend(other.block_totals)
        return self


def _gram(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # float matmul is exact for 0/1 inputs far below 2**53 frames
    return np.rint(x.T.astype(np.float64) @ y.astype(np.float64)).astype(np.int64)


def accumulate_block(block: FrameBlock, array_mode: str = "dual", tagging: bool = False) -> CoincidenceAccumulator:
    """Coincidence counts of a block of frames."""
    a = block.outputs_a
    single = array_mode == "single"
    b = a if single else block.outputs_b
    if b is None:
        raise DomainError("dual-array accumulation needs outputs of both arrays")
    acc = CoincidenceAccumulator.empty((a.shape[1], b.shape[1]), array_mode, tagging)
    acc.c = _gram(a, b)
    acc.n_frames = block.n_frames
    acc.pixel_counts_a = a.sum(axis=0, dtype=np.int64)
    if not single:
        acc.pixel_counts_b = b.sum(axis=0, dtype=np.int64)
    row = [block.n_frames, 0, 0, 0, 0, 0]
    if single:
        np.fill_diagonal(acc.c, 0)
    row[1] = int(acc.c.sum())
    if tagging:
        pa, na = block.photon_a, block.noise_a
        pb, nb = (pa, na) if single else (block.photon_b, block.noise_b)
        both_photon = _gram(pa, pb)
        pair = np.zeros_like(both_photon)
        fr, i, j = block.pairs.T if block.pairs.size else (np.zeros(0, np.int64),) * 3
        if single:
            keep = i != j
            fr, i, j = (np.concatenate([fr[keep]] * 2), np.concatenate([i[keep], j[keep]]),
                        np.concatenate([j[keep], i[keep]]))
        if fr.size:
            # several detected pairs on one cell in one frame give one coincidence
            key = np.unique((fr * pair.shape[0] + i) * pair.shape[1] + j)
            cell = key % (pair.shape[0] * pair.shape[1])
            np.add.at(pair.reshape(-1), cell, 1)
        tags = {
            "pair": pair,
            "cross": both_photon - pair,
            "noise_photon": _gram(pa, nb) + _gram(na, pb),
            "noise_noise": _gram(na, nb),
        }
        if single:
            for t in tags.values():
                np.fill_diagonal(t, 0)
        acc.tagged = tags
        row[2:] = [int(tags[t].sum()) for t in TAGS]
    acc.block_totals = [tuple(row)]
    return acc


def accumulate(
    frames: Iterable[Frame],
    config: RunConfig,
    dims: Optional[tuple] = None,
) -> CoincidenceAccumulator:
    """Accumulate coincidences from an iterable of frames.

    A coincidence is counted between ``i`` and ``j`` whenever both outputs are
    1 in the same frame. In single-array mode the counts are formed among
    pixels of the one array and the diagonal is left at zero.
    """
    acc = None
    for fr in frames:
        a = np.asarray(fr.outputs_a, dtype=bool)
        b = a if config.array_mode == "single" else fr.outputs_b
        if b is None:
            raise DomainError("dual-array frame without second-array outputs")
        b = np.asarray(b, dtype=bool)
        if acc is None:
            shape = dims or (a.size, b.size)
            acc = CoincidenceAccumulator.empty(shape, config.array_mode, config.tagging)
        if (a.size, b.size) != acc.c.shape:
            raise DomainError(f"frame of shape {(a.size, b.size)} does not match {acc.c.shape}")
        if config.tagging and (fr.truth_a is None or (config.array_mode == "dual" and fr.truth_b is None)):
            raise DomainError("tagged accumulation needs frames sampled with ground truth")
        block = _frame_as_block(fr, a, b, config.array_mode)
        acc.merge(accumulate_block(block, config.array_mode, config.tagging))
    if acc is None:
        if dims is None:
            raise DomainError("no frames and no dimensions given")
        acc = CoincidenceAccumulator.empty(dims, config.array_mode, config.tagging)
    return acc


def _frame_as_block(fr: Frame, a, b, array_mode):
    def split(out, truth):
        if truth is None:
            return out[None, :], np.zeros((1, out.size), bool)
        truth = np.asarray(truth)
        return (truth == PixelTruth.PHOTON)[None, :], (truth == PixelTruth.NOISE)[None, :]

    pa, na = split(a, fr.truth_a)
    pb = nb = None
    if array_mode == "dual":
        pb, nb = split(b, fr.truth_b)
    pairs = np.zeros((0, 3), np.int64)
    if fr.detected_pairs is not None and len(fr.detected_pairs):
        dp = np.asarray(fr.detected_pairs, dtype=np.int64).reshape(-1, 2)
        pairs = np.concatenate([np.zeros((len(dp), 1), np.int64), dp], axis=1)
    return FrameBlock(pa, na, pb, nb, pairs)


def simulate(
    joint: JointDistribution,
    det: DetectorModel,
    source: SourceModel,
    config: RunConfig,
    dump: Optional[BinaryIO] = None,
) -> CoincidenceAccumulator:
    """Generate ``config.n_frames`` frames and accumulate their coincidences.

    ``dump`` receives the raw frames in the binary frame-dump format when given.
    """
    if dump is not None:
        d1, d2 = joint.dims
        write_dump_header(dump, d1, d2 if config.array_mode == "dual" else 0, config.n_frames)

    def run(block: int):
        n = min(config.block_size, config.n_frames - block * config.block_size)
        frames = sample_block(joint, det, source, block_rng(config.seed, block), n, config.array_mode)
        acc = accumulate_block(frames, config.array_mode, config.tagging)
        packed = _pack_block(frames) if dump is not None else None
        return acc, packed

    total = CoincidenceAccumulator.empty(joint.dims, config.array_mode, config.tagging)
    blocks = range(config.n_blocks)
    if config.workers == 1:
        results = map(run, blocks)
        for acc, packed in results:
            total.merge(acc)
            if packed is not None:
                dump.write(packed)
    else:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            for acc, packed in pool.map(run, blocks):
                total.merge(acc)
                if packed is not None:
                    dump.write(packed)
    return total


def tagged_accumulate(
    joint: JointDistribution,
    det: DetectorModel,
    source: SourceModel,
    config: RunConfig,
) -> CoincidenceAccumulator:
    """Like :func:`simulate`, classifying every coincidence by its origin.

    Both photons of one detected pair give ``pair``; photons of different
    pairs give ``cross`` (this includes two pairs on the same cell that each
    lost a photon); a photon with a noise event gives ``noise_photon``; two
    noise events give ``noise_noise``.
    """
    cfg = RunConfig(config.seed, config.n_frames, config.array_mode, True, config.workers, config.block_size)
    return simulate(joint, det, source, cfg)


def estimate_g2(acc: CoincidenceAccumulator) -> CorrelationResult:
    """Normalized correlation estimate with per-cell binomial standard errors.

    ``raw_standard_error`` is ``sqrt(p(1-p)/N_F)`` for the per-frame coincidence
    probability ``p = C/N_F``; ``standard_error`` is the same scaled to the
    normalized matrix. Decomposition terms are per-frame rates from the tags
    (all attributed to ``pair`` when tagging was off).
    """
    total = int(acc.c.sum())
    if total == 0 or acc.n_frames == 0:
        raise EmptyAccumulatorError("accumulator holds no coincidences")
    nf = acc.n_frames
    p_hat = acc.c / nf
    raw_se = np.sqrt(p_hat * (1.0 - p_hat) / nf)
    if acc.tagged is not None:
        terms = [acc.tagged[t] / nf for t in TAGS]
    else:
        zero = np.zeros_like(p_hat)
        terms = [p_hat, zero, zero, zero]
    res = CorrelationResult.from_terms(*terms, array_mode=acc.array_mode, n_frames=nf)
    res.g2 = acc.c / total
    res.raw_standard_error = raw_se
    res.standard_error = raw_se / res.normalization_constant
    return res


def ratio_standard_error(acc: CoincidenceAccumulator, column: int) -> tuple:
    """Batch-means estimate and standard error of a tag's share of all coincidences.

    ``column`` indexes ``block_totals`` (2 = pair, 3 = cross, 4 = noise-photon,
    5 = noise-noise). Uses the usual ratio-estimator variance over blocks.
    """
    rows = np.asarray(acc.block_totals, dtype=float)
    if rows.shape[0] < 2:
        raise DomainError("at least two blocks are needed for a batch-means error")
    x, y = rows[:, column], rows[:, 1]
    r = x.sum() / y.sum()
    nb = rows.shape[0]
    var = np.sum((x - r * y) ** 2) / (nb * (nb - 1) * y.mean() ** 2)
    return float(r), float(np.sqrt(var))


# --------------------------------------------------------------------------
# Raw frame dump

_MAGIC = b"PCFR"
_VERSION = 1
_HEADER = struct.Struct("<4sHIIQ")


def write_dump_header(fh: BinaryIO, d1: int, d2: int, n_frames: int) -> None:
    fh.write(_HEADER.pack(_MAGIC, _VERSION, d1, d2, n_frames))


def _pack_block(block: FrameBlock) -> bytes:
    rows = [np.packbits(block.outputs_a, axis=1, bitorder="little")]
    if block.photon_b is not None:
        rows.append(np.packbits(block.outputs_b, axis=1, bitorder="little"))
    return np.concatenate(rows, axis=1).tobytes()


def write_frame_dump(path, frames: Iterable[Frame], d1: int, d2: int) -> int:
    """Write frames to ``path``; ``d2 == 0`` marks single-array data. Returns the frame count."""
    frames = list(frames)
    with open(path, "wb") as fh:
        write_dump_header(fh, d1, d2, len(frames))
        for fr in frames:
            row = [np.packbits(np.asarray(fr.outputs_a, dtype=bool), bitorder="little")]
            if d2:
                row.append(np.packbits(np.asarray(fr.outputs_b, dtype=bool), bitorder="little"))
            fh.write(np.concatenate(row).tobytes())
    return len(frames)


def read_frame_dump(path) -> tuple:
    """Read a frame dump. Returns ``(outputs_a, outputs_b)`` as uint8 arrays, ``outputs_b`` ``None`` if single-array."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise DomainError("frame dump truncated before end of header")
    magic, version, d1, d2, n = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise DomainError("not a frame dump (bad magic)")
    if version != _VERSION:
        raise DomainError(f"unsupported frame dump version {version}")
    wa, wb = -(-d1 // 8), -(-d2 // 8)
    body = np.frombuffer(data, dtype=np.uint8, offset=_HEADER.size)
    if body.size != n * (wa + wb):
        raise DomainError("frame dump size does not match its header")
    body = body.reshape(n, wa + wb)
    a = np.unpackbits(body[:, :wa], axis=1, count=d1, bitorder="little")
    b = np.unpackbits(body[:, wa:], axis=1, count=d2, bitorder="little") if d2 else None
    return a, b

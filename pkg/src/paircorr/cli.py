"""Command line entry point: ``paircorr analytic|mc|replicate|dump-config``.

Exit status is 0 on success, 2 for usage or configuration problems, 3 when
the model rejects its inputs and 4 for file-system errors.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import analytic, experiment, montecarlo
from .config import Config, ConfigError, apply_overrides, dump_config, load_config
from .errors import PairCorrError
from .model import DetectorModel, JointDistribution, SourceModel
from .output import Column, OutputDir, RunManifest

log = logging.getLogger("paircorr")

EXIT_OK, EXIT_USAGE, EXIT_DOMAIN, EXIT_IO = 0, 2, 3, 4


class _State:
    """Resolved joint distribution plus the labels used to reduce it."""

    def __init__(self, joint: JointDistribution, kind: str, labels=None, n_bins=None, geom=None):
        self.joint, self.kind, self.labels, self.n_bins, self.geom = joint, kind, labels, n_bins, geom

    def reduce(self, m, exclude_diagonal=False) -> Optional[analytic.ReducedCurve]:
        if self.labels is not None:
            return analytic.diagonal_reduce(m, "angle", self.labels, self.n_bins, exclude_diagonal)
        if self.joint.is_square:
            return analytic.diagonal_reduce(m, "difference", exclude_diagonal=exclude_diagonal)
        return None


def build_state(cfg: Config) -> _State:
    s = cfg.state
    if s.kind == "example":
        return _State(experiment.build_example_state(experiment.ExampleStateSpec(s.D, s.c)), "example")
    if s.kind == "annulus":
        geom = experiment.build_annulus(s.inner_radius, s.outer_radius, s.bin_width)
        return _State(experiment.build_annular_joint(geom), "annulus", geom.bins, geom.n_bins, geom)
    if not s.matrix_path:
        raise ConfigError("state.kind 'matrix' needs state.matrix_path")
    try:
        p = np.loadtxt(s.matrix_path, delimiter=",", comments="#", ndmin=2)
    except ValueError as exc:
        raise PairCorrError(f"cannot parse matrix file {s.matrix_path}: {exc}") from exc
    return _State(JointDistribution(p, renormalize=s.renormalize), "matrix")


def worker_count(requested: int) -> int:
    cap = os.environ.get("PAIRCORR_THREADS")
    if cap is None or cap == "":
        return max(1, requested)
    try:
        cap_n = int(cap)
    except ValueError:
        raise ConfigError(f"PAIRCORR_THREADS must be an integer, got {cap!r}") from None
    if cap_n < 1:
        raise ConfigError("PAIRCORR_THREADS must be at least 1")
    return max(1, min(requested, cap_n))


_TERM_COLS = [
    Column("pair", "1/frame", "probability per frame of a coincidence from one detected pair"),
    Column("cross", "1/frame", "probability per frame of a coincidence from photons of two different pairs"),
    Column("photon_noise", "1/frame", "probability per frame of a photon on one pixel and a noise event on the other"),
    Column("noise_noise", "1/frame", "probability per frame of noise events on both pixels"),
]


# --------------------------------------------------------------------------
# analytic


def cmd_analytic(cfg: Config, out: OutputDir) -> None:
    state = build_state(cfg)
    joint = state.joint
    det = DetectorModel(cfg.detector.p_d, cfg.detector.p_n)
    mode = cfg.analytic.array_mode
    i, j = cfg.analytic.cell if cfg.analytic.cell is not None else (None, None)
    tail = cfg.source.truncation_tail

    mu_apx = analytic.optimal_mu_approx(joint, det, i, j, mode) if det.p_n > 0 else 0.0
    mu_opt, v_max = analytic.optimal_mu_exact(joint, det, i, j, mode)

    rows = []
    for mu in cfg.source.mu_grid:
        src = SourceModel(mu, tail)
        rows.append({
            "mu": mu,
            "detected_photons": det.p_d * mu,
            "detected_events": analytic.mean_events_per_frame(joint, det, src, mode),
            "visibility_exact": analytic.visibility_exact(joint, det, src, i, j, mode),
            "visibility_quadratic": analytic.visibility_quadratic(joint, det, mu, i, j, mode),
            "mu_opt_approx": mu_apx,
            "mu_opt_exact": mu_opt,
            "v_max": v_max,
        })
    cols = [
        Column("mu", "pairs/frame", "mean number of emitted pairs per frame"),
        Column("detected_photons", "photons/frame", "p_d*mu, mean detected photons per arm per frame"),
        Column("detected_events", "events/frame", "mean photo-detections plus noise events per frame on the first array"),
        Column("visibility_exact", "1", "(G-Gb)/(G+Gb) at the evaluated cell, exact Poisson average"),
        Column("visibility_quadratic", "1", "same from the low-flux quadratic approximation"),
        Column("mu_opt_approx", "pairs/frame", "low-flux estimate of the visibility-maximizing mu"),
        Column("mu_opt_exact", "pairs/frame", "numerical maximizer of visibility_exact"),
        Column("v_max", "1", "visibility_exact at mu_opt_exact"),
    ]
    cell = f"({i}, {j})" if i is not None else "peak of the joint distribution"
    out.table("analytic.csv", cols, rows, "analytic visibility sweep",
              [f"state: {state.kind}; array_mode: {mode}; cell: {cell}",
               f"p_d: {det.p_d!r}; p_n: {det.p_n!r}"])

    for mu in cfg.analytic.decomposition_mu or [mu_opt]:
        _write_decomposition(out, state, det, SourceModel(mu, tail), mode)


def _write_decomposition(out: OutputDir, state: _State, det: DetectorModel, src: SourceModel, mode: str) -> None:
    res = analytic.g2_exact(state.joint, det, src, mode)
    name = f"decomposition_mu_{src.mu:.6g}.csv"
    notes = [f"mu: {src.mu!r}; array_mode: {mode}; p_d: {det.p_d!r}; p_n: {det.p_n!r}",
             f"normalization_constant: {res.normalization_constant!r} (sum of the unnormalized matrix)"]
    single = mode == "single"
    if state.reduce(res.unnormalized) is None:
        d1, d2 = state.joint.dims
        ii, jj = np.meshgrid(np.arange(d1), np.arange(d2), indexing="ij")
        rows = [{"i": int(a), "j": int(b), **{t: float(getattr(res, t)[a, b]) for t in analytic.TERMS}}
                for a, b in zip(ii.ravel(), jj.ravel())]
        cols = [Column("i", "index", "pixel on the first array"), Column("j", "index", "pixel on the second array")]
        out.table(name, cols + _TERM_COLS, rows, "per-cell decomposition of the exact correlation", notes)
        return
    reduced = {t: state.reduce(getattr(res, t), single) for t in analytic.TERMS}
    first = reduced["pair"]
    if state.labels is not None:
        key = Column("delta_bin", "bins", "angular bin difference (label_i - label_j) mod n_bins")
        extra = Column("delta_theta", "deg", "delta_bin times the bin width")
        width = state.geom.bin_width
    else:
        key = Column("offset", "pixels", "index difference (i - j) mod D")
        extra = None
    rows = []
    for k, off in enumerate(first.offsets):
        r = {key.name: int(off), "n_cells": int(first.counts[k])}
        if extra is not None:
            r[extra.name] = float(off) * width
        for t in analytic.TERMS:
            r[t] = float(reduced[t].values[k])
        rows.append(r)
    cols = [key] + ([extra] if extra else []) + [Column("n_cells", "cells", "number of cells summed")] + _TERM_COLS
    out.table(name, cols, rows, "decomposition of the exact correlation summed along constant offset", notes)


# --------------------------------------------------------------------------
# mc


def cmd_mc(cfg: Config, out: OutputDir) -> None:
    state = build_state(cfg)
    joint = state.joint
    det = DetectorModel(cfg.detector.p_d, cfg.detector.p_n)
    src = SourceModel(cfg.source.mu, cfg.source.truncation_tail)
    m = cfg.mc
    run = montecarlo.RunConfig(m.seed, m.n_frames, m.array_mode, m.tagging, worker_count(m.workers), m.block_size)
    if m.array_mode == "single" and not joint.is_square:
        raise PairCorrError("single-array mode needs a square joint distribution")

    if m.dump_frames:
        with open(out.binary("frames.pcfr"), "wb") as fh:
            acc = montecarlo.simulate(joint, det, src, run, dump=fh)
    else:
        acc = montecarlo.simulate(joint, det, src, run)

    notes = [f"state: {state.kind}; array_mode: {m.array_mode}; seed: {m.seed}; n_frames: {m.n_frames}",
             f"mu: {src.mu!r}; p_d: {det.p_d!r}; p_n: {det.p_n!r}"]
    out.matrix("coincidences.csv", acc.c, "coincidence counts per pixel pair", "frames",
               "number of frames in which both pixels fired", notes)
    if acc.tagged is not None:
        for t in montecarlo.TAGS:
            out.matrix(f"tagged_{t}.csv", acc.tagged[t], f"coincidences of origin '{t}'", "frames",
                       f"number of frames with a '{t}' coincidence on the pixel pair", notes)

    single = m.array_mode == "single"
    red = state.reduce(acc.c.astype(float), single)
    if red is not None:
        tags = {t: state.reduce(acc.tagged[t].astype(float), single) for t in montecarlo.TAGS} if acc.tagged else {}
        rows = []
        for k, off in enumerate(red.offsets):
            r = {"offset": int(off), "n_cells": int(red.counts[k]),
                 "coincidences": int(round(red.values[k])), "mean_per_cell": float(red.mean[k]) if red.counts[k] else 0.0}
            if state.geom is not None:
                r["delta_theta"] = float(off) * state.geom.bin_width
            for t, c in tags.items():
                r[t] = int(round(c.values[k]))
            rows.append(r)
        if state.geom is not None:
            cols = [Column("offset", "bins", "angular bin difference (label_i - label_j) mod n_bins"),
                    Column("delta_theta", "deg", "offset times the bin width")]
        else:
            cols = [Column("offset", "pixels", "index difference (i - j) mod D")]
        cols += [Column("n_cells", "cells", "number of pixel pairs with this offset"),
                 Column("coincidences", "frames", "summed coincidence counts"),
                 Column("mean_per_cell", "frames", "coincidences / n_cells (0 when n_cells is 0)")]
        cols += [Column(t, "frames", f"summed '{t}' coincidence counts") for t in tags]
        out.table("reduced.csv", cols, rows, "coincidences reduced along constant offset", notes)

    ev_a, ev_b = acc.events_per_frame
    summary = [
        {"quantity": "n_frames", "value": acc.n_frames, "standard_error": 0.0},
        {"quantity": "events_per_frame_a", "value": float(ev_a), "standard_error": float("nan")},
        {"quantity": "total_coincidences", "value": int(acc.c.sum()), "standard_error": 0.0},
    ]
    if ev_b is not None:
        summary.insert(2, {"quantity": "events_per_frame_b", "value": float(ev_b), "standard_error": float("nan")})
    if acc.tagged is not None and len(acc.block_totals) >= 2 and acc.c.sum() > 0:
        for col, t in enumerate(montecarlo.TAGS, start=2):
            r, se = montecarlo.ratio_standard_error(acc, col)
            summary.append({"quantity": f"fraction_{t}", "value": r, "standard_error": se})
    out.table("summary.csv", [Column("quantity", "-", "name of the summary statistic"),
                              Column("value", "varies", "events/frame, frames or a dimensionless fraction"),
                              Column("standard_error", "same as value", "batch-means error over blocks; nan if not estimated")],
              summary, "Monte Carlo run summary", notes)


# --------------------------------------------------------------------------
# replicate


def cmd_replicate(cfg: Config, out: OutputDir, figure: str) -> None:
    if figure == "fig3":
        f = cfg.fig3
        res = experiment.replicate_fig3(f.p_n_list, f.p_d, experiment.ExampleStateSpec(f.D, f.c), f.mu_grid)
        notes = [f"example state D={f.D} c={f.c!r}; p_d: {f.p_d!r}; dual arrays"]
        out.table("fig3_curves.csv", [
            Column("p_n", "1", "noise probability per pixel per frame"),
            Column("mu", "pairs/frame", "mean emitted pairs per frame"),
            Column("detected", "photons/frame", "p_d*mu"),
            Column("visibility_exact", "1", "exact visibility at the peak cell"),
            Column("visibility_quadratic", "1", "low-flux approximation of the same"),
        ], res.curves, "visibility against detected photons", notes)
        out.table("fig3_optima.csv", [
            Column("p_n", "1", "noise probability"),
            Column("mu_opt_exact", "pairs/frame", "maximizer of the exact visibility"),
            Column("v_max", "1", "exact visibility at mu_opt_exact"),
            Column("mu_opt_approx", "pairs/frame", "low-flux estimate of the optimum"),
            Column("v_at_approx", "1", "exact visibility at mu_opt_approx"),
        ], res.optima, "visibility optima", notes)
        out.table("fig3_decomposition.csv", [
            Column("panel", "-", "optimum, below (a quarter of the optimum) or above (same visibility as below)"),
            Column("p_n", "1", "noise probability"),
            Column("mu", "pairs/frame", "mean emitted pairs"),
            Column("offset", "pixels", "signed index difference i - j"),
        ] + [Column(c.name, "1", c.meaning.replace("probability per frame", "share of the normalized correlation"))
             for c in _TERM_COLS], res.decomposition, "normalized correlation terms along constant offset", notes)
        return
    if figure != "fig4":
        raise ConfigError(f"unknown figure {figure!r}")
    f = cfg.fig4
    geom = experiment.build_annulus(f.inner_radius, f.outer_radius, f.bin_width)
    det = DetectorModel(f.p_d, f.p_n)
    points = None
    if f.fluxes and f.exposures and f.p_n_by_exposure:
        points = experiment.fig4_points(f.fluxes, f.exposures, f.p_n_by_exposure)
    res = experiment.replicate_fig4(geom, det, f.mu_grid, f.n_frames, f.seed, worker_count(cfg.mc.workers), points)
    notes = [f"annulus {f.inner_radius!r} <= r < {f.outer_radius!r}: {res.n_pixels} pixels, {res.n_bins} bins",
             f"single array; p_d: {f.p_d!r}; n_frames per point: {f.n_frames}; seed: {f.seed}"]
    out.table("fig4_visibility.csv", [
        Column("label", "-", "sweep point label"),
        Column("mu", "pairs/frame", "mean emitted pairs per frame"),
        Column("p_n", "1", "noise probability"),
        Column("detected_photons", "photons/frame", "2*p_d*mu"),
        Column("mean_events", "events/frame", "simulated mean events per frame"),
        Column("visibility_mc", "1", "visibility of the 180 deg bin in the simulated curve"),
        Column("coincidences", "frames", "total simulated coincidences"),
        Column("expected_events", "events/frame", "exact mean events per frame"),
        Column("visibility_exact", "1", "visibility of the 180 deg bin in the exact curve"),
    ], res.rows, "visibility against mean events per frame", notes)
    curve_rows = []
    for label, (theta, mean, counts) in res.curves.items():
        for a, b, c in zip(theta, mean, counts):
            curve_rows.append({"label": label, "delta_theta": float(a), "n_cells": int(c),
                               "mean_per_cell": float(b) if c else 0.0})
    out.table("fig4_curves.csv", [
        Column("label", "-", "sweep point label"),
        Column("delta_theta", "deg", "angular difference of the two pixels"),
        Column("n_cells", "cells", "pixel pairs at this angle difference"),
        Column("mean_per_cell", "frames", "coincidence count per pixel pair"),
    ], curve_rows, "simulated angular correlation curves", notes)


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML configuration file")
    common.add_argument("--seed", type=int, metavar="U64", help="random seed (overrides mc.seed and fig4.seed)")
    common.add_argument("--frames", type=int, metavar="N", help="number of frames (overrides mc.n_frames and fig4.n_frames)")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--tagging", action="store_true", default=None, help="classify coincidences by origin")
    common.add_argument("--array-mode", choices=("dual", "single"), help="detector arrangement")
    common.add_argument("--dump-config", metavar="PATH", help="also write the resolved configuration to PATH")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="paircorr", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("analytic", parents=[common], help="exact and approximate visibility sweep")
    sub.add_parser("mc", parents=[common], help="Monte Carlo coincidence run")
    rp = sub.add_parser("replicate", parents=[common], help="reproduce a reference sweep")
    rp.add_argument("figure", choices=("fig3", "fig4"))
    sub.add_parser("dump-config", parents=[common], help="print the resolved configuration as YAML")
    return p


def _run(args) -> int:
    cfg = load_config(args.config)
    cfg = apply_overrides(cfg, args.seed, args.frames, args.out, args.tagging, args.array_mode)
    text = dump_config(cfg)
    if args.dump_config:
        Path(args.dump_config).write_text(text)
    if args.command == "dump-config":
        sys.stdout.write(text)
        return EXIT_OK

    seed = {"mc": cfg.mc.seed, "replicate": cfg.fig4.seed if getattr(args, "figure", "") == "fig4" else None}
    command = args.command + (f" {args.figure}" if args.command == "replicate" else "")
    out = OutputDir(cfg.out_dir, RunManifest(cfg.digest(), seed.get(args.command), command))
    (out.path / "config.yaml").write_text(f"# manifest: manifest.txt\n# config_hash: {cfg.digest()}\n" + text)
    out.manifest.files.append("config.yaml")
    if args.command == "analytic":
        cmd_analytic(cfg, out)
    elif args.command == "mc":
        cmd_mc(cfg, out)
    else:
        cmd_replicate(cfg, out, args.figure)
    out.close()
    log.info("wrote %d files to %s", len(out.manifest.files), out.path)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"paircorr: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PairCorrError, ArithmeticError, ValueError) as exc:
        print(f"paircorr: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except OSError as exc:
        print(f"paircorr: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: one subcommand per pipeline stage.

Every run writes ``resolved_config.json`` and ``run_manifest.json`` (the
list of files it produced) into its output directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .eeg_io import FormatError, ManifestError, atomic_write_text, load_manifest
from .evaluation import (
    DEFAULT_WINDOWS,
    ScoreSet,
    aggregate,
    aggregation_sweep,
    format_duration,
    metrics_table_csv,
    parse_windows,
    read_scores,
    roc_csv,
    sweep_csv,
    write_scores,
)
from .model import NetConfig
from .preprocess import FilterSpec, SegmentBatch, preprocess_hour, write_segments
from .synthgen import SynthConfig, generate_dataset
from .train import ConfigError, TrainConfig, TrainingDivergedError, run_loo

log = logging.getLogger("epgdetect")

STAGE_ERRORS = (ValueError, OSError, ManifestError, FormatError, ConfigError, TrainingDivergedError, KeyError)


class Run:
    """Tracks the files a subcommand writes so they can be listed afterwards."""

    def __init__(self, out_dir, command: str, config: dict):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.outputs: list[Path] = []
        self.text("resolved_config.json", json.dumps({"command": command, **config}, indent=2, default=str) + "\n")

    def path(self, name) -> Path:
        p = self.out_dir / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(p)
        return p

    def text(self, name, content: str) -> Path:
        p = self.path(name)
        atomic_write_text(p, content)
        return p

    def adopt(self, paths) -> None:
        self.outputs.extend(Path(p) for p in paths)

    def finish(self) -> None:
        entries = []
        for p in sorted(set(self.outputs)):
            if p.exists():
                entries.append({
                    "path": str(p.relative_to(self.out_dir)) if p.is_relative_to(self.out_dir) else str(p),
                    "bytes": p.stat().st_size,
                    "sha256": hashlib.sha256(p.read_bytes()).hexdigest(),
                })
        doc = {"command": self.command, "version": __version__, "outputs": entries}
        atomic_write_text(self.out_dir / "run_manifest.json", json.dumps(doc, indent=2) + "\n")


# -- helpers ---------------------------------------------------------------------


def _apply_config_file(args, parser) -> dict:
    """Values from ``--config`` JSON override the command-line flags."""
    if not getattr(args, "config", None):
        return {}
    with open(args.config) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        parser.error(f"{args.config}: expected a JSON object")
    known = set(vars(args)) - {"command", "func", "config"}
    unknown = sorted(set(doc) - known)
    if unknown:
        parser.error(f"{args.config}: unknown keys {unknown}")
    for k, v in doc.items():
        setattr(args, k, v)
    return doc


def _args_dict(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func",)}


def _data_manifest(path):
    path = Path(path)
    return load_manifest(path / "manifest.json" if path.is_dir() else path)


def _synth_config(args) -> SynthConfig:
    return SynthConfig(
        seed=args.seed,
        background_decay_exponent=args.decay_exponent,
        epg_peak_hz=args.peak_hz,
        epg_harmonics=args.harmonics,
        epg_band_gain_db=args.band_gain_db,
        epg_event_rate_per_min=args.event_rate,
        dropout_fraction=args.dropout_fraction,
        burst_amplitude=args.burst_amplitude,
        state_jitter_db=args.state_jitter_db,
    )


def _filter_spec(args) -> FilterSpec:
    return FilterSpec(band_low_hz=args.band_low, band_high_hz=args.band_high, notch_hz=args.notch, notch_q=args.notch_q)


def _add_filter_flags(p):
    g = p.add_argument_group("filtering")
    g.add_argument("--band-low", type=float, default=0.5, help="band-pass low edge, Hz")
    g.add_argument("--band-high", type=float, default=160.0, help="band-pass high edge, Hz")
    g.add_argument("--notch", type=float, default=50.0, help="mains notch frequency, Hz")
    g.add_argument("--notch-q", type=float, default=30.0)


# -- subcommands -----------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _synth_config(args)
    run = Run(args.out, "synth", {**_args_dict(args), "synth_config": asdict(cfg)})
    manifest = generate_dataset(cfg, args.pps, args.ctrl, args.hours, args.out,
                                progress=lambda p: log.info("wrote %s", p))
    run.adopt(e.file for e in manifest.entries)
    run.adopt([run.out_dir / "manifest.json", run.out_dir / "synth_config.json"])
    run.finish()
    print(f"{len(manifest)} records -> {run.out_dir / 'manifest.json'}")
    return 0


def cmd_preprocess(args) -> int:
    manifest = _data_manifest(args.data)
    spec = _filter_spec(args)
    run = Run(args.out, "preprocess", {**_args_dict(args), "filter_spec": asdict(spec)})
    rows = ["subject,phase,hour,n_segments,loss_fraction"]
    for e in manifest.entries:
        rec = e.load()
        batch = SegmentBatch.from_segments(preprocess_hour(rec, spec, args.mad_multiplier, 5.0, args.max_loss))
        path = run.path(f"segments/{e.subject_id}_{e.phase}_{e.hour_index:03d}.segb")
        write_segments(batch, path)
        run.adopt([str(path) + ".json"])
        rows.append(f"{e.subject_id},{e.phase},{e.hour_index},{len(batch)},{rec.loss_fraction:.6f}")
    run.text("segments_summary.csv", "\n".join(rows) + "\n")
    run.finish()
    print(f"{len(manifest)} hours -> {run.out_dir / 'segments'}")
    return 0


def cmd_train(args) -> int:
    from .plotting import plot_score_hist, plot_training

    manifest = _data_manifest(args.data)
    group = {"pps": "PPS", "control": "Control"}[args.group.lower()]
    net = NetConfig.preset(args.task_preset)
    if args.filter_width is not None:
        net = NetConfig.from_dict({**asdict(net), "filter_width": args.filter_width})
    tc = TrainConfig(
        hours_per_phase=args.hours_per_phase, val_fraction=args.val_fraction, batch_size=args.batch_size,
        lr=args.lr, max_epochs=args.epochs, patience=args.patience, seed=args.seed,
        segments_per_hour=args.segments_per_hour,
    )
    spec = _filter_spec(args)
    run = Run(args.out, "train", {**_args_dict(args), "net_config": asdict(net), "train_config": asdict(tc),
                                  "filter_spec": asdict(spec)})
    folds = run_loo(manifest, group, tc, net, spec, out_dir=run.out_dir,
                    progress=lambda m: log.info("%s", m))
    for f in folds:
        d = f"fold_{f.held_out_subject}"
        run.adopt(run.out_dir / d / n for n in ("epochs.csv", "model.ckpt", "model.ckpt.json", "fold.json"))
        plot_training(f.history, run.path(f"{d}/training.png"))
    scores = ScoreSet.concat([f.test_scores for f in folds])
    write_scores(scores, run.path("scores.csv"))
    plot_score_hist(scores.scores, scores.labels, run.path("score_hist.png"),
                    names=_class_names(group), title=f"{group} test segments")
    run.text("folds.json", json.dumps([f.summary() for f in folds], indent=1) + "\n")
    run.finish()
    print(f"{len(folds)} folds, {len(scores)} test segments -> {run.out_dir / 'scores.csv'}")
    return 0


def _class_names(group_or_phases) -> tuple[str, str]:
    if group_or_phases == "Control" or "EarlyCtrl" in set(group_or_phases):
        return ("EarlyCtrl", "LateCtrl")
    return ("BL", "EPG")


def cmd_eval(args) -> int:
    from .plotting import plot_roc, plot_score_hist
    from .stats import DegenerateStatisticError, anova_f, cohens_d, rank_sum_test

    scores = read_scores(args.scores)
    scores.check()
    windows = parse_windows(args.windows)
    run = Run(args.out, "eval", _args_dict(args))
    rows = aggregation_sweep(scores, windows, pooled=args.pooled, threshold=args.threshold)
    lines = ["window_s,mean_auc,std_auc,mean_sen,mean_spe"]
    lines += [f"{r.window_s:g},{r.mean_auc:.6f},{r.std_auc:.6f},{r.mean_sen:.6f},{r.mean_spe:.6f}" for r in rows]
    run.text("metrics.csv", "\n".join(lines) + "\n")
    run.text("metrics_per_fold.csv", metrics_table_csv(rows))
    names = _class_names(set(scores.phases.tolist()))
    stats_rows = ["window_s,subject,n_neg,n_pos,cohens_d,rank_sum_u,rank_sum_p,anova_f,anova_p"]
    for r in rows:
        tag = format_duration(r.window_s)
        run.text(f"roc_{tag}.csv", roc_csv(r.per_fold))
        plot_roc(r.per_fold, run.path(f"roc_{tag}.png"), title=f"ROC, {tag} windows")
        for subject in scores.subjects():
            agg = aggregate(scores.for_subject(subject), r.window_s)
            neg, pos = agg.scores[agg.labels == 0], agg.scores[agg.labels == 1]
            try:
                d = cohens_d(pos, neg)
                f_stat, f_p = anova_f(pos, neg)
            except (ValueError, DegenerateStatisticError):
                d = f_stat = f_p = float("nan")
            u, p = rank_sum_test(pos, neg) if len(pos) and len(neg) else (float("nan"), float("nan"))
            stats_rows.append(f"{r.window_s:g},{subject},{len(neg)},{len(pos)},{d:.6g},{u:.6g},{p:.6g},{f_stat:.6g},{f_p:.6g}")
            if args.plots_per_subject:
                plot_score_hist(agg.scores, agg.labels, run.path(f"scores_{subject}_{tag}.png"), names=names,
                                title=f"{subject}, {tag} windows")
    run.text("score_stats.csv", "\n".join(stats_rows) + "\n")
    run.finish()
    for r in rows:
        print(f"{format_duration(r.window_s):>4}  AUC {r.mean_auc:.3f} +- {r.std_auc:.3f}  "
              f"SEN {r.mean_sen:.3f}  SPE {r.mean_spe:.3f}")
    return 0


def cmd_sweep(args) -> int:
    from .plotting import plot_sweep

    scores = read_scores(args.scores)
    scores.check()
    windows = parse_windows(args.windows)
    run = Run(args.out, "sweep", _args_dict(args))
    rows = aggregation_sweep(scores, windows, pooled=args.pooled)
    run.text("sweep.csv", sweep_csv(rows))
    plot_sweep(rows, run.path("sweep.png"))
    run.finish()
    sys.stdout.write(sweep_csv(rows))
    return 0


def cmd_cluster(args) -> int:
    from .plotting import plot_clusters, plot_elbow
    from .spectral import cluster_spectra, elbow_k, log_power_matrix, select_certain, write_cluster_report

    scores = read_scores(args.scores)
    manifest = _data_manifest(args.data)
    spec = _filter_spec(args)
    idx, predicted = select_certain(scores.probs, args.threshold)
    if len(idx) < 2:
        raise ValueError(f"only {len(idx)} segments exceed certainty {args.threshold}; nothing to cluster")
    run = Run(args.out, "cluster", {**_args_dict(args), "filter_spec": asdict(spec)})
    entries = {e.key: e for e in manifest.entries}
    wanted: dict = {}
    for row, cls in zip(idx, predicted):
        key = (scores.subject_ids[row], scores.phases[row], int(scores.hour_index[row]))
        wanted.setdefault(key, []).append((int(scores.segment_index[row]), row, int(cls)))
    values, classes = [], []
    for key, items in sorted(wanted.items()):
        if key not in entries:
            raise ValueError(f"scores reference {key}, which is not in the manifest")
        segs = {s.segment_index: s for s in preprocess_hour(entries[key].load(), spec)}
        for seg_idx, row, cls in items:
            if seg_idx not in segs:
                raise ValueError(f"segment {seg_idx} of {key} not produced by preprocessing")
            values.append(segs[seg_idx].values)
            classes.append(cls if args.class_source == "predicted" else int(scores.labels[row]))
    freqs, spectra = log_power_matrix(np.stack(values))
    k = "auto" if args.k == "auto" else int(args.k)
    report = cluster_spectra(freqs, spectra, classes, k=k, k_range=range(1, args.k_max + 1))
    write_cluster_report(report, run.path("cluster.json"), run.path("cluster_spectra.csv"))
    plot_clusters(report, run.path("cluster.png"), names=_class_names(set(scores.phases.tolist())))
    if len(report.elbow) >= 1:
        plot_elbow(report.elbow, run.path("elbow.png"))
    run.finish()
    pct = report.class_percentages()
    print(f"{len(values)} certain segments, k={report.k} (elbow suggests {elbow_k(report.elbow)})")
    for c in range(report.k):
        print(f"cluster {c}: n={int(report.class_counts[c].sum())}  class-1 {pct[c, 1]:.1f}%")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(args.seed)
    lines = ["check,max_rel_error,tolerance,passed"]
    lines += [f"{r.name},{r.max_rel_error:.3e},{r.tolerance:g},{int(r.passed)}" for r in results]
    if args.out:
        run = Run(args.out, "gradcheck", _args_dict(args))
        run.text("gradcheck.csv", "\n".join(lines) + "\n")
        run.finish()
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<28} {r.max_rel_error:.2e} (tol {r.tolerance:g})")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"error: gradient check failed for {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="epgdetect", description="EEG epileptogenesis detection pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    parser.subcommands = {}

    def command(name, func, help):
        p = sub.add_parser(name, help=help, description=help)
        parser.subcommands[name] = p
        p.set_defaults(func=func)
        p.add_argument("--config", help="JSON file whose keys override the flags below")
        return p

    p = command("synth", cmd_synth, "generate a synthetic dataset (records + manifest)")
    p.add_argument("--pps", type=int, default=7, help="number of PPS subjects")
    p.add_argument("--ctrl", type=int, default=3, help="number of control subjects")
    p.add_argument("--hours", type=int, default=25, help="hours per phase per subject")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--decay-exponent", type=float, default=1.0, help="1/f^alpha background slope")
    p.add_argument("--peak-hz", type=float, default=22.0)
    p.add_argument("--harmonics", type=int, default=2)
    p.add_argument("--band-gain-db", type=float, default=4.0, help="EPG gain over 20-100 Hz")
    p.add_argument("--event-rate", type=float, default=6.0, help="EPG bursts per minute")
    p.add_argument("--dropout-fraction", type=float, default=0.01)
    p.add_argument("--burst-amplitude", type=float, default=1.0, help="burst peak relative to background RMS")
    p.add_argument("--state-jitter-db", type=float, default=4.0, help="SD of the slow 20-100 Hz level drift")

    p = command("preprocess", cmd_preprocess, "filter, clean and segment every record")
    p.add_argument("--data", required=True, help="dataset directory or manifest.json")
    p.add_argument("--out", required=True)
    p.add_argument("--mad-multiplier", type=float, default=8.0)
    p.add_argument("--max-loss", type=float, default=0.2, help="drop segments losing more than this fraction")
    _add_filter_flags(p)

    p = command("train", cmd_train, "leave-one-subject-out training and test scoring for one group")
    p.add_argument("--group", required=True, choices=["pps", "control", "PPS", "Control"])
    p.add_argument("--task-preset", default="toy", choices=["toy", "full"])
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--hours-per-phase", type=int, default=25)
    p.add_argument("--segments-per-hour", type=int, default=None, help="subsample training segments per hour")
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--filter-width", type=int, default=None, help="override the conv filter width")
    p.add_argument("--seed", type=int, default=0)
    _add_filter_flags(p)

    p = command("eval", cmd_eval, "ROC / SEN / SPE and score statistics from a score CSV")
    p.add_argument("--scores", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--windows", default="5s,60m", help="comma list, e.g. 5s,2m,1h")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--pooled", action="store_true", help="one AUC over all subjects instead of a fold mean")
    p.add_argument("--plots-per-subject", action="store_true")

    p = command("sweep", cmd_sweep, "AUC as a function of aggregation window length")
    p.add_argument("--scores", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--windows", default=",".join(DEFAULT_WINDOWS))
    p.add_argument("--pooled", action="store_true")

    p = command("cluster", cmd_cluster, "k-means on log-power spectra of confidently classified segments")
    p.add_argument("--scores", required=True)
    p.add_argument("--data", required=True, help="dataset the scores were computed on")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.999)
    p.add_argument("--k", default="4", help="cluster count or 'auto' for the elbow choice")
    p.add_argument("--k-max", type=int, default=10)
    p.add_argument("--class-source", choices=["true", "predicted"], default="true")
    _add_filter_flags(p)

    p = command("gradcheck", cmd_gradcheck, "finite-difference check of every autodiff op")
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_config_file(args, parser.subcommands[args.command])
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except STAGE_ERRORS as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

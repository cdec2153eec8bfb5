"""Segment scoring, windowed prediction aggregation and ROC metrics.

EPG (label 1) is the positive class everywhere; the scalar score of a
segment or window is its normalised EPG probability.
"""

from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass

import numpy as np

from .eeg_io import atomic_write_text

SEGMENT_SECONDS = 5.0
HOUR_SECONDS = 3600.0
DEFAULT_WINDOWS = ("5s", "30s", "1m", "2m", "5m", "10m", "20m", "30m", "60m")
_UNITS = {"s": 1.0, "m": 60.0, "h": 3600.0}


def parse_duration(text: str) -> float:
    """``'30s'``, ``'2m'``, ``'1h'`` -> seconds."""
    m = re.fullmatch(r"\s*(\d+)\s*([smh])\s*", str(text))
    if not m:
        raise ValueError(f"bad duration {text!r}: expected an integer followed by s, m or h")
    seconds = int(m.group(1)) * _UNITS[m.group(2)]
    if seconds <= 0:
        raise ValueError(f"duration must be positive: {text!r}")
    return seconds


def parse_windows(text: str) -> list[float]:
    items = [t for t in str(text).split(",") if t.strip()]
    if not items:
        raise ValueError("no windows given")
    return [parse_duration(t) for t in items]


def format_duration(seconds: float) -> str:
    s = int(round(seconds))
    if s % 3600 == 0:
        return f"{s // 3600}h"
    if s % 60 == 0:
        return f"{s // 60}m"
    return f"{s}s"


# -- score sets ---------------------------------------------------------------


@dataclass
class ScoreSet:
    """Columnar per-segment softmax outputs with provenance."""

    subject_ids: np.ndarray  # fixed-width str
    phases: np.ndarray
    hour_index: np.ndarray
    segment_index: np.ndarray
    probs: np.ndarray  # [N, 2] (p_bl, p_epg)
    labels: np.ndarray

    def __post_init__(self):
        self.subject_ids = np.asarray(self.subject_ids, dtype=str)
        self.phases = np.asarray(self.phases, dtype=str)
        self.hour_index = np.asarray(self.hour_index, dtype=np.int64)
        self.segment_index = np.asarray(self.segment_index, dtype=np.int64)
        self.probs = np.asarray(self.probs, dtype=np.float64).reshape(-1, 2)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.labels)
        for name in ("subject_ids", "phases", "hour_index", "segment_index", "probs"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"ScoreSet column {name} has {len(getattr(self, name))} rows, expected {n}")

    def __len__(self):
        return len(self.labels)

    @property
    def scores(self) -> np.ndarray:
        return self.probs[:, 1]

    def check(self, tol: float = 1e-6) -> None:
        bad = np.flatnonzero(np.abs(self.probs.sum(1) - 1) > tol)
        if bad.size:
            raise ValueError(f"{bad.size} rows do not sum to 1 (first at row {bad[0]})")
        keys = list(zip(self.subject_ids, self.phases, self.hour_index, self.segment_index))
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate (subject, phase, hour, segment) rows")

    def subjects(self) -> list[str]:
        return sorted(set(self.subject_ids.tolist()))

    def take(self, idx) -> "ScoreSet":
        idx = np.asarray(idx)
        return ScoreSet(self.subject_ids[idx], self.phases[idx], self.hour_index[idx],
                        self.segment_index[idx], self.probs[idx], self.labels[idx])

    def for_subject(self, subject: str) -> "ScoreSet":
        return self.take(np.flatnonzero(self.subject_ids == subject))

    @classmethod
    def concat(cls, sets: list["ScoreSet"]) -> "ScoreSet":
        if not sets:
            return cls.empty()
        return cls(
            np.concatenate([s.subject_ids for s in sets]),
            np.concatenate([s.phases for s in sets]),
            np.concatenate([s.hour_index for s in sets]),
            np.concatenate([s.segment_index for s in sets]),
            np.concatenate([s.probs for s in sets]),
            np.concatenate([s.labels for s in sets]),
        )

    @classmethod
    def empty(cls) -> "ScoreSet":
        return cls([], [], [], [], np.zeros((0, 2)), [])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["subject", "phase", "hour", "segment", "p_bl", "p_epg", "label"])
        for row in zip(self.subject_ids, self.phases, self.hour_index, self.segment_index,
                       self.probs[:, 0], self.probs[:, 1], self.labels):
            s, ph, h, i, p0, p1, y = row
            w.writerow([s, ph, int(h), int(i), repr(float(p0)), repr(float(p1)), int(y)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ScoreSet":
        rows = list(csv.DictReader(io.StringIO(text)))
        expected = {"subject", "phase", "hour", "segment", "p_bl", "p_epg", "label"}
        if rows and not expected <= set(rows[0]):
            raise ValueError(f"score CSV needs columns {sorted(expected)}, found {sorted(rows[0])}")
        if not rows:
            return cls.empty()
        return cls(
            [r["subject"] for r in rows],
            [r["phase"] for r in rows],
            [int(r["hour"]) for r in rows],
            [int(r["segment"]) for r in rows],
            [[float(r["p_bl"]), float(r["p_epg"])] for r in rows],
            [int(r["label"]) for r in rows],
        )


def write_scores(scores: ScoreSet, path) -> None:
    atomic_write_text(path, scores.to_csv())


def read_scores(path) -> ScoreSet:
    with open(path, newline="") as f:
        return ScoreSet.from_csv(f.read())


def score_segments(model, batch, batch_size: int = 128) -> ScoreSet:
    """Run ``model`` in eval mode over a SegmentBatch."""
    seg_len = model.config.input_len
    if batch.values.ndim != 2 or (len(batch) and batch.values.shape[1] != seg_len):
        raise ValueError(f"segments have shape {batch.values.shape}, model expects [N, {seg_len}]")
    probs = model.predict(batch.values, batch_size=batch_size) if len(batch) else np.zeros((0, 2))
    return ScoreSet(batch.subject_ids, batch.phases, batch.hour_index, batch.segment_index, probs, batch.labels)


# -- aggregation ----------------------------------------------------------------


@dataclass
class AggregatedScores:
    """One row per aggregation window (columnar)."""

    subject_ids: np.ndarray
    phases: np.ndarray
    window_start: np.ndarray  # segment slot index on the subject's phase timeline
    counts: np.ndarray
    probs: np.ndarray
    labels: np.ndarray
    low_coverage: np.ndarray

    def __len__(self):
        return len(self.labels)

    @property
    def scores(self):
        return self.probs[:, 1]


def aggregate(scores: ScoreSet, window_s: float, segment_s: float = SEGMENT_SECONDS,
              hour_s: float = HOUR_SECONDS) -> AggregatedScores:
    """Sum softmax pairs over aligned windows, then renormalise each sum.

    Windows tile each (subject, phase) timeline, where a segment sits at slot
    ``hour * (hour_s / segment_s) + segment``. Missing segments shrink N;
    windows holding fewer than half of the expected count are flagged
    ``low_coverage``. Windows with no segments are not emitted.
    """
    ratio = window_s / segment_s
    per_window = int(round(ratio))
    if per_window < 1 or abs(ratio - per_window) > 1e-9:
        raise ValueError(f"window {window_s}s must be a positive multiple of the {segment_s}s segment")
    per_hour = int(round(hour_s / segment_s))
    n = len(scores)
    if n == 0:
        z = np.zeros(0, np.int64)
        return AggregatedScores(scores.subject_ids, scores.phases, z, z, np.zeros((0, 2)), z, np.zeros(0, bool))
    win = (scores.hour_index * per_hour + scores.segment_index) // per_window
    key = np.zeros(n, np.int64)
    for col in (scores.subject_ids, scores.phases):
        uniq, inv = np.unique(col, return_inverse=True)
        key = key * len(uniq) + inv.reshape(-1)
    key = key * (int(win.max()) + 1) + win
    _, first, idx = np.unique(key, return_index=True, return_inverse=True)
    idx = idx.reshape(-1)
    n_win = len(first)
    sums = np.zeros((n_win, 2))
    np.add.at(sums, idx, scores.probs)
    counts = np.bincount(idx, minlength=n_win)
    labels = scores.labels[first]
    if np.any(scores.labels != labels[idx]):
        raise ValueError("a window mixes labels; phases must carry a single label")
    return AggregatedScores(
        scores.subject_ids[first],
        scores.phases[first],
        win[first] * per_window,
        counts,
        sums / sums.sum(axis=1, keepdims=True),
        labels,
        counts < math.ceil(0.5 * per_window),
    )


# -- ROC --------------------------------------------------------------------------


@dataclass
class RocResult:
    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    auc: float


def roc_auc(scores, labels) -> RocResult:
    """Threshold sweep over distinct scores from +inf down to -inf.

    Rates are kept as integer counts until the end so the trapezoid over
    tied blocks reproduces the Mann-Whitney statistic exactly.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both classes present")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    distinct = np.flatnonzero(np.diff(s)) if len(s) > 1 else np.zeros(0, int)
    ends = np.r_[distinct, len(s) - 1]
    tp = np.r_[0, np.cumsum(y)[ends]]
    fp = np.r_[0, np.cumsum(~y)[ends]]
    thresholds = np.r_[np.inf, s[ends]]
    # trapezoid in count space: sum of dfp * (tp_prev + tp_cur) / 2
    area2 = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    auc = area2 / (2.0 * n_pos * n_neg)
    tpr, fpr = tp / n_pos, fp / n_neg
    return RocResult(np.r_[thresholds, -np.inf], np.r_[tpr, 1.0], np.r_[fpr, 1.0], float(auc))


def sen_spe(scores, labels, threshold: float = 0.5) -> tuple[float, float]:
    """Sensitivity and specificity for ``score >= threshold`` -> positive.

    A metric whose class is absent comes back as NaN.
    """
    if not np.isfinite(threshold):
        raise ValueError("threshold must be finite")
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    pred = s >= threshold
    tp, fn = int((pred & y).sum()), int((~pred & y).sum())
    tn, fp = int((~pred & ~y).sum()), int((pred & ~y).sum())
    sen = tp / (tp + fn) if tp + fn else float("nan")
    spe = tn / (tn + fp) if tn + fp else float("nan")
    return sen, spe


FPR_GRID = np.linspace(0.0, 1.0, 101)


def interpolate_roc(roc: RocResult, grid=FPR_GRID) -> np.ndarray:
    """Vertical averaging helper: the highest TPR reached at each grid FPR."""
    fpr, tpr = roc.fpr, roc.tpr
    # ROC is a step/segment path; take the upper envelope at repeated FPR values
    out = np.interp(grid, fpr, tpr, left=0.0, right=1.0)
    last = np.searchsorted(fpr, grid, side="right") - 1
    return np.maximum(out, tpr[np.clip(last, 0, len(tpr) - 1)])


@dataclass
class FoldMetrics:
    subject: str
    window_s: float
    auc: float
    sen: float
    spe: float
    n_windows: int
    n_low_coverage: int
    roc: RocResult


def fold_metrics(scores: ScoreSet, window_s: float, threshold: float = 0.5) -> FoldMetrics:
    agg = aggregate(scores, window_s)
    roc = roc_auc(agg.scores, agg.labels)
    sen, spe = sen_spe(agg.scores, agg.labels, threshold)
    subjects = scores.subjects()
    return FoldMetrics(",".join(subjects), window_s, roc.auc, sen, spe, len(agg), int(agg.low_coverage.sum()), roc)


@dataclass
class SweepRow:
    window_s: float
    mean_auc: float
    std_auc: float
    mean_sen: float
    mean_spe: float
    per_fold: list


def aggregation_sweep(scores: ScoreSet, windows, pooled: bool = False, threshold: float = 0.5) -> list[SweepRow]:
    """AUC per window length; each subject is one fold (the LOO test set).

    ``pooled`` computes a single AUC over all subjects' windows instead of
    the mean over folds (std is then 0).
    """
    windows = [parse_duration(w) if isinstance(w, str) else float(w) for w in windows]
    if not windows:
        raise ValueError("windows must be nonempty")
    rows = []
    for w in windows:
        if pooled:
            folds = [fold_metrics(scores, w, threshold)]
        else:
            folds = [fold_metrics(scores.for_subject(s), w, threshold) for s in scores.subjects()]
        aucs = np.array([f.auc for f in folds])
        rows.append(SweepRow(w, float(aucs.mean()), float(aucs.std()),
                             float(np.nanmean([f.sen for f in folds])), float(np.nanmean([f.spe for f in folds])),
                             folds))
    return rows


def sweep_csv(rows: list[SweepRow]) -> str:
    lines = ["window_s,mean_auc,std_auc"]
    lines += [f"{r.window_s:g},{r.mean_auc:.6f},{r.std_auc:.6f}" for r in rows]
    return "\n".join(lines) + "\n"


def roc_csv(folds: list[FoldMetrics], grid=FPR_GRID) -> str:
    """Long-format ROC table: one block per fold, then the vertical average."""
    lines = ["fold,fpr,tpr"]
    curves = []
    for f in folds:
        for x, y in zip(f.roc.fpr, f.roc.tpr):
            lines.append(f"{f.subject},{x:.6g},{y:.6g}")
        curves.append(interpolate_roc(f.roc, grid))
    mean = np.mean(curves, axis=0)
    for x, y in zip(grid, mean):
        lines.append(f"mean,{x:.6g},{y:.6g}")
    return "\n".join(lines) + "\n"


def metrics_table_csv(rows: list[SweepRow]) -> str:
    lines = ["window_s,subject,auc,sen,spe,n_windows,n_low_coverage"]
    for r in rows:
        for f in r.per_fold:
            lines.append(f"{r.window_s:g},{f.subject},{f.auc:.6f},{f.sen:.6f},{f.spe:.6f},{f.n_windows},{f.n_low_coverage}")
    return "\n".join(lines) + "\n"

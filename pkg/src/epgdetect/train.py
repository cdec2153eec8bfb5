"""Minibatch training, stratified validation split and leave-one-subject-out folds."""

from __future__ import annotations

import json
import logging
import math
import warnings
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .eeg_io import GROUP_PHASES, DatasetManifest, ManifestEntry, atomic_write_text
from .evaluation import ScoreSet, roc_auc, score_segments
from .model import Model, NetConfig, build, save_model
from .preprocess import FilterSpec, SegmentBatch, preprocess_hour

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    hours_per_phase: int = 25
    val_fraction: float = 0.1
    batch_size: int = 32
    lr: float = 1e-3
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    # keep at most this many randomly chosen segments per training hour (None = all)
    segments_per_hour: int | None = None
    # loss above this (or non-finite) aborts the fold
    divergence_loss: float = 1e3

    def validate(self) -> None:
        if not 0 < self.val_fraction < 1:
            raise ConfigError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if self.patience > self.max_epochs:
            raise ConfigError(f"patience ({self.patience}) exceeds max_epochs ({self.max_epochs})")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1 or self.hours_per_phase < 1:
            raise ConfigError("batch_size, max_epochs, patience and hours_per_phase must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.segments_per_hour is not None and self.segments_per_hour < 1:
            raise ConfigError("segments_per_hour must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


def _rng(seed: int, *parts) -> np.random.Generator:
    key = [seed & 0xFFFFFFFF, seed >> 32 & 0xFFFFFFFF]
    key += [zlib.crc32(str(p).encode()) for p in parts]
    return np.random.default_rng(key)


# -- data selection -------------------------------------------------------------


def loo_folds(manifest: DatasetManifest, group: str) -> list[tuple[str, list[str]]]:
    subjects = manifest.subjects(group)
    if len(subjects) < 2:
        raise ConfigError(f"leave-one-out needs >= 2 {group} subjects, found {len(subjects)}")
    return [(s, [t for t in subjects if t != s]) for s in subjects]


def sample_hours(manifest: DatasetManifest, subjects, phase: str, n_hours: int, seed: int) -> list[ManifestEntry]:
    """Up to ``n_hours`` distinct hours per subject, chosen reproducibly."""
    out = []
    for subject in subjects:
        available = manifest.hours(subject, phase)
        if len(available) < n_hours:
            warnings.warn(f"{subject}/{phase}: {n_hours} hours requested, {len(available)} available; using all")
            chosen = list(available)
        else:
            idx = _rng(seed, "hours", subject, phase).choice(len(available), n_hours, replace=False)
            chosen = [available[i] for i in sorted(idx)]
        out.extend(chosen)
    return out


def split_train_val(batch: SegmentBatch, val_fraction: float, seed: int) -> tuple[SegmentBatch, SegmentBatch]:
    """Stratified split with ``round(val_fraction * N)`` validation segments."""
    n = len(batch)
    if n < 10:
        raise ConfigError(f"need >= 10 segments to split, got {n}")
    labels = batch.labels.astype(np.int64)
    classes = np.unique(labels)
    if classes.size < 2:
        raise ConfigError("all segments share one label; cannot stratify")
    n_val = int(round(val_fraction * n))
    rng = _rng(seed, "split")
    # largest-remainder allocation of the validation quota across classes
    counts = np.array([(labels == c).sum() for c in classes])
    exact = n_val * counts / n
    quota = np.floor(exact).astype(int)
    for i in np.argsort(-(exact - quota), kind="stable")[: n_val - quota.sum()]:
        quota[i] += 1
    val_idx = []
    for c, q in zip(classes, quota):
        members = np.flatnonzero(labels == c)
        val_idx.extend(rng.choice(members, q, replace=False).tolist())
    val_mask = np.zeros(n, bool)
    val_mask[val_idx] = True
    return batch.take(np.flatnonzero(~val_mask)), batch.take(np.flatnonzero(val_mask))


def load_hours(entries, spec: FilterSpec = FilterSpec(), segments_per_hour: int | None = None,
               seed: int = 0, cache: dict | None = None) -> SegmentBatch:
    """Preprocess each hour and stack its segments, optionally subsampled."""
    batches = []
    for entry in entries:
        full = cache.get(entry.key) if cache is not None else None
        if full is None:
            full = SegmentBatch.from_segments(preprocess_hour(entry.load(), spec))
            if cache is not None:
                cache[entry.key] = full
        if segments_per_hour is not None and len(full) > segments_per_hour:
            idx = _rng(seed, "segments", *entry.key).choice(len(full), segments_per_hour, replace=False)
            full = full.take(np.sort(idx))
        batches.append(full)
    return SegmentBatch.concat(batches)


# -- training -------------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    val_auc: float


@dataclass
class FoldResult:
    held_out_subject: str
    train_subjects: list = field(default_factory=list)
    checkpoint: str | None = None
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_auc: float = float("nan")
    train_hours: list = field(default_factory=list)
    test_hours: list = field(default_factory=list)
    test_scores: ScoreSet | None = None
    train_config: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "held_out_subject": self.held_out_subject,
            "train_subjects": self.train_subjects,
            "checkpoint": self.checkpoint,
            "best_epoch": self.best_epoch,
            "best_val_auc": self.best_val_auc,
            "history": [asdict(h) for h in self.history],
            "train_hours": [list(k) for k in self.train_hours],
            "test_hours": [list(k) for k in self.test_hours],
            "train_config": self.train_config,
        }


def _cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    p = probs[np.arange(len(labels)), labels.astype(np.int64)]
    return float(-np.mean(np.log(np.maximum(p, 1e-12))))


def _safe_auc(scores, labels) -> float:
    try:
        return roc_auc(scores, labels).auc
    except ValueError:
        return float("nan")


def write_epoch_log(history: list[EpochLog], path) -> None:
    lines = ["epoch,train_loss,val_loss,val_auc"]
    lines += [f"{h.epoch},{h.train_loss:.6f},{h.val_loss:.6f},{h.val_auc:.6f}" for h in history]
    atomic_write_text(path, "\n".join(lines) + "\n")


def train_fold(model: Model, train: SegmentBatch, val: SegmentBatch, config: TrainConfig,
               log_path=None, checkpoint_path=None, progress=None) -> FoldResult:
    """Adam on softmax cross-entropy with early stopping on validation AUC.

    The model ends up holding the parameters of the best-AUC epoch.
    """
    config.validate()
    if len(train) == 0 or len(val) == 0:
        raise ConfigError("empty training or validation set")
    if np.isnan(train.values).any() or np.isnan(val.values).any():
        raise ConfigError("training data contains NaN")
    params = model.trainable()
    result = FoldResult("", checkpoint=str(checkpoint_path) if checkpoint_path else None,
                        train_config=asdict(config))
    best_auc, best_state, stale = -math.inf, None, 0
    labels = train.labels.astype(np.int64)
    for epoch in range(1, config.max_epochs + 1):
        order = _rng(config.seed, "epoch", epoch).permutation(len(train))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            logits = model.logits(train.values[idx], training=True)
            loss, _ = ad.softmax_cross_entropy(logits, labels[idx])
            value = float(loss.value)
            if not math.isfinite(value) or value > config.divergence_loss:
                raise TrainingDivergedError(
                    f"training diverged at epoch {epoch}, step {model.step}: loss {value:.4g} (lr {config.lr:g})"
                )
            ad.backward(loss, params)
            ad.adam_step(params, lr=config.lr)
            model.step += 1
            losses.append(value)
            if not all(np.isfinite(p.value).all() for p in params):
                raise TrainingDivergedError(f"non-finite parameters at epoch {epoch}, step {model.step} (lr {config.lr:g})")
        probs = model.predict(val.values)
        entry = EpochLog(epoch, float(np.mean(losses)), _cross_entropy(probs, val.labels),
                         _safe_auc(probs[:, 1], val.labels))
        result.history.append(entry)
        if log_path is not None:
            write_epoch_log(result.history, log_path)
        if progress:
            progress(entry)
        log.info("epoch %d train_loss %.4f val_loss %.4f val_auc %.4f", *asdict(entry).values())
        if entry.val_auc > best_auc:
            best_auc, best_state, stale = entry.val_auc, model.state_dict(), 0
            result.best_epoch = epoch
        else:
            stale += 1
            if stale >= config.patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    result.best_val_auc = float(best_auc)
    if checkpoint_path is not None:
        save_model(model, checkpoint_path)
    return result


def run_loo(manifest: DatasetManifest, group: str, train_config: TrainConfig, net_config: NetConfig,
            spec: FilterSpec = FilterSpec(), out_dir=None, progress=None) -> list[FoldResult]:
    """One fold per subject of ``group``; the held-out subject's every hour is scored.

    Folds run one after another; each builds a fresh model seeded from the
    fold's subject so results do not depend on fold order.
    """
    train_config.validate()
    net_config.validate()
    phases = GROUP_PHASES[group]
    out_dir = Path(out_dir) if out_dir is not None else None
    cache: dict = {}
    results = []
    for held_out, train_subjects in loo_folds(manifest, group):
        fold_seed = int(_rng(train_config.seed, "fold", held_out).integers(2**31))
        entries = [e for ph in phases
                   for e in sample_hours(manifest, train_subjects, ph, train_config.hours_per_phase, train_config.seed)]
        data = load_hours(entries, spec, train_config.segments_per_hour, train_config.seed, cache)
        train, val = split_train_val(data, train_config.val_fraction, fold_seed)
        model = build(net_config, seed=fold_seed)
        fold_dir = out_dir / f"fold_{held_out}" if out_dir is not None else None
        if fold_dir is not None:
            fold_dir.mkdir(parents=True, exist_ok=True)
        if progress:
            progress(f"fold {held_out}: {len(train)} train / {len(val)} val segments")
        result = train_fold(
            model, train, val, train_config,
            log_path=fold_dir / "epochs.csv" if fold_dir else None,
            checkpoint_path=fold_dir / "model.ckpt" if fold_dir else None,
            progress=progress,
        )
        result.held_out_subject = held_out
        result.train_subjects = list(train_subjects)
        result.train_hours = [e.key for e in entries]
        test_entries = [e for ph in phases for e in manifest.hours(held_out, ph)]
        result.test_hours = [e.key for e in test_entries]
        scores = []
        for e in test_entries:
            batch = cache.get(e.key)
            if batch is None:
                batch = SegmentBatch.from_segments(preprocess_hour(e.load(), spec))
            scores.append(score_segments(model, batch))
        result.test_scores = ScoreSet.concat(scores)
        if fold_dir is not None:
            atomic_write_text(fold_dir / "fold.json", json.dumps(result.summary(), indent=1) + "\n")
        results.append(result)
    return results

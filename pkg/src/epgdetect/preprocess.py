"""Band-pass / notch filtering, outlier rejection and 5 s segmentation.

Lost samples are NaN throughout. Filters run independently over each
contiguous NaN-free run so a dropout never smears into valid data.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import signal

from .eeg_io import PHASE_LABEL, EegRecord, atomic_write_bytes, atomic_write_text


class DegenerateInputError(ValueError):
    """Input has no valid samples to work with."""


@dataclass(frozen=True)
class FilterSpec:
    band_low_hz: float = 0.5
    band_high_hz: float = 160.0
    notch_hz: float = 50.0
    notch_q: float = 30.0
    filter_order: int = 4

    def validate(self, sampling_rate_hz: float) -> None:
        nyq = sampling_rate_hz / 2
        if not 0 < self.band_low_hz < self.band_high_hz < nyq:
            raise ValueError(
                f"need 0 < band_low ({self.band_low_hz}) < band_high ({self.band_high_hz}) < Nyquist ({nyq})"
            )
        if not self.band_low_hz < self.notch_hz < self.band_high_hz:
            raise ValueError(f"notch {self.notch_hz} Hz lies outside the passband")
        if self.notch_q <= 0 or self.filter_order < 1:
            raise ValueError("notch_q and filter_order must be positive")


@dataclass
class Segment:
    subject_id: str
    phase: str
    hour_index: int
    segment_index: int
    start_offset_s: float
    values: np.ndarray
    label: int


def valid_runs(samples: np.ndarray) -> list[tuple[int, int]]:
    """Half-open ``(start, stop)`` spans of consecutive non-NaN samples."""
    valid = ~np.isnan(samples)
    if not valid.any():
        return []
    edges = np.diff(np.concatenate(([0], valid.astype(np.int8), [0])))
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)
    return list(zip(starts.tolist(), stops.tolist()))


def _apply_sos(record: EegRecord, sos: np.ndarray, min_run: int) -> EegRecord:
    x = record.samples.astype(np.float64)
    out = x.copy()
    default_pad = 3 * (2 * len(sos) + 1)
    for start, stop in valid_runs(x):
        if stop - start < min_run:
            continue
        seg = x[start:stop]
        out[start:stop] = signal.sosfiltfilt(sos, seg, padlen=min(default_pad, len(seg) - 1))
    return record.with_samples(out.astype(np.float32))


def bandpass_sos(spec: FilterSpec, fs: float) -> np.ndarray:
    return signal.butter(spec.filter_order, [spec.band_low_hz, spec.band_high_hz], btype="bandpass", fs=fs, output="sos")


def notch_sos(spec: FilterSpec, fs: float) -> np.ndarray:
    b, a = signal.iirnotch(spec.notch_hz, spec.notch_q, fs=fs)
    return signal.tf2sos(b, a)


def bandpass(record: EegRecord, spec: FilterSpec = FilterSpec()) -> EegRecord:
    """Zero-phase Butterworth band-pass; runs shorter than 3x order pass through."""
    spec.validate(record.sampling_rate_hz)
    return _apply_sos(record, bandpass_sos(spec, record.sampling_rate_hz), 3 * spec.filter_order)


def notch(record: EegRecord, spec: FilterSpec = FilterSpec()) -> EegRecord:
    """Zero-phase biquad notch at ``spec.notch_hz``."""
    spec.validate(record.sampling_rate_hz)
    return _apply_sos(record, notch_sos(spec, record.sampling_rate_hz), 3 * spec.filter_order)


def _spread(x: np.ndarray, med: float) -> float:
    dev = np.abs(x - med)
    mad = float(np.median(dev))
    if mad > 0:
        return mad
    # MAD collapses when over half the samples are identical; the mean
    # deviation still exposes isolated spikes and is 0 only for a flat signal
    return float(dev.mean())


def remove_outliers(record: EegRecord, mad_multiplier: float = 8.0) -> EegRecord:
    """Mark samples farther than ``mad_multiplier`` x MAD from the median as lost.

    Median and MAD are recomputed over the surviving samples until nothing
    more is rejected, so the result is a fixed point (idempotent).
    """
    if mad_multiplier <= 0:
        raise ValueError(f"mad_multiplier must be positive, got {mad_multiplier}")
    x = record.samples.copy()
    valid = ~np.isnan(x)
    if not valid.any():
        raise DegenerateInputError("record has no valid samples")
    while True:
        vals = x[valid]
        med = float(np.median(vals))
        spread = _spread(vals, med)
        if spread == 0:
            break
        bad = valid & (np.abs(x - med) > mad_multiplier * spread)
        if not bad.any():
            break
        x[bad] = np.nan
        valid &= ~bad
        if not valid.any():
            break
    return record.with_samples(x)


def _interpolate_nans(values: np.ndarray) -> np.ndarray:
    nan = np.isnan(values)
    if not nan.any():
        return values
    idx = np.arange(values.size)
    out = values.copy()
    # np.interp holds the edge values outside the valid range
    out[nan] = np.interp(idx[nan], idx[~nan], values[~nan])
    return out


def segment_hour(record: EegRecord, seg_seconds: float = 5.0, max_loss_fraction: float = 0.2) -> list[Segment]:
    """Cut non-overlapping windows; drop those with loss strictly above the limit.

    Kept windows have their NaNs filled by linear interpolation. A trailing
    partial window is dropped.
    """
    seg_len = int(round(seg_seconds * record.sampling_rate_hz))
    if seg_len < 1:
        raise ValueError("segment shorter than one sample")
    n_windows = record.n_samples // seg_len
    label = PHASE_LABEL.get(record.phase, -1)
    limit = max_loss_fraction * seg_len
    out = []
    for i in range(n_windows):
        vals = record.samples[i * seg_len : (i + 1) * seg_len]
        lost = int(np.isnan(vals).sum())
        if lost > limit + 1e-9 or lost == seg_len:
            continue
        out.append(
            Segment(
                record.subject_id,
                record.phase,
                record.hour_index,
                i,
                i * seg_len / record.sampling_rate_hz,
                _interpolate_nans(vals),
                label,
            )
        )
    return out


def preprocess_hour(
    record: EegRecord,
    spec: FilterSpec = FilterSpec(),
    mad_multiplier: float = 8.0,
    seg_seconds: float = 5.0,
    max_loss_fraction: float = 0.2,
) -> list[Segment]:
    """bandpass -> notch -> remove_outliers -> segment_hour."""
    if record.n_samples == 0:
        raise DegenerateInputError("empty record")
    rec = notch(bandpass(record, spec), spec)
    rec = remove_outliers(rec, mad_multiplier)
    return segment_hour(rec, seg_seconds, max_loss_fraction)


# -- segment batch files -------------------------------------------------------

SEGB_MAGIC = b"SEGB"
_SEGB_HEADER = struct.Struct("<4sII")


@dataclass
class SegmentBatch:
    """Columnar view of many segments, the trainer's input unit."""

    values: np.ndarray  # [N, seg_len] float32
    labels: np.ndarray  # [N] uint8
    subject_ids: list[str]
    phases: list[str]
    hour_index: np.ndarray
    segment_index: np.ndarray

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_segments(cls, segments: list[Segment], seg_len: int | None = None) -> "SegmentBatch":
        if not segments:
            return cls.empty(seg_len or 0)
        return cls(
            np.stack([s.values for s in segments]).astype(np.float32),
            np.array([s.label for s in segments], dtype=np.uint8),
            [s.subject_id for s in segments],
            [s.phase for s in segments],
            np.array([s.hour_index for s in segments], dtype=np.int64),
            np.array([s.segment_index for s in segments], dtype=np.int64),
        )

    @classmethod
    def empty(cls, seg_len: int) -> "SegmentBatch":
        return cls(np.zeros((0, seg_len), np.float32), np.zeros(0, np.uint8), [], [],
                   np.zeros(0, np.int64), np.zeros(0, np.int64))

    @classmethod
    def concat(cls, batches: list["SegmentBatch"]) -> "SegmentBatch":
        batches = [b for b in batches if len(b)]
        if not batches:
            return cls.empty(0)
        return cls(
            np.concatenate([b.values for b in batches]),
            np.concatenate([b.labels for b in batches]),
            [s for b in batches for s in b.subject_ids],
            [p for b in batches for p in b.phases],
            np.concatenate([b.hour_index for b in batches]),
            np.concatenate([b.segment_index for b in batches]),
        )

    def take(self, idx) -> "SegmentBatch":
        idx = np.asarray(idx, dtype=np.int64)
        return SegmentBatch(
            self.values[idx],
            self.labels[idx],
            [self.subject_ids[i] for i in idx],
            [self.phases[i] for i in idx],
            self.hour_index[idx],
            self.segment_index[idx],
        )


def write_segments(batch: SegmentBatch, path) -> None:
    """SEGB file plus a ``.json`` sidecar carrying per-segment provenance."""
    count, seg_len = batch.values.shape if len(batch) else (0, batch.values.shape[1])
    data = (
        _SEGB_HEADER.pack(SEGB_MAGIC, count, seg_len)
        + np.ascontiguousarray(batch.values, dtype="<f4").tobytes()
        + np.ascontiguousarray(batch.labels, dtype=np.uint8).tobytes()
    )
    atomic_write_bytes(path, data)
    side = {
        "subject_id": batch.subject_ids,
        "phase": batch.phases,
        "hour_index": batch.hour_index.tolist(),
        "segment_index": batch.segment_index.tolist(),
    }
    atomic_write_text(str(path) + ".json", json.dumps(side) + "\n")


def read_segments(path) -> SegmentBatch:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _SEGB_HEADER.size:
        raise ValueError(f"{path}: truncated SEGB header")
    magic, count, seg_len = _SEGB_HEADER.unpack_from(data)
    if magic != SEGB_MAGIC:
        raise ValueError(f"{path}: magic: expected {SEGB_MAGIC!r}, found {magic!r}")
    expected = _SEGB_HEADER.size + count * seg_len * 4 + count
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {count}x{seg_len}, found {len(data)}")
    off = _SEGB_HEADER.size
    values = np.frombuffer(data, "<f4", count * seg_len, off).reshape(count, seg_len).copy()
    labels = np.frombuffer(data, np.uint8, count, off + count * seg_len * 4).copy()
    side_path = Path(str(path) + ".json")
    if side_path.exists():
        side = json.loads(side_path.read_text())
        return SegmentBatch(values, labels, side["subject_id"], side["phase"],
                            np.array(side["hour_index"], np.int64), np.array(side["segment_index"], np.int64))
    return SegmentBatch(values, labels, [""] * count, [""] * count,
                        np.zeros(count, np.int64), np.arange(count, dtype=np.int64))


def filter_spec_dict(spec: FilterSpec) -> dict:
    return asdict(spec)

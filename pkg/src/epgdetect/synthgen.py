"""Deterministic synthetic EEG hours standing in for the rat recordings.

Every hour is 1/f^alpha Gaussian background synthesized in the frequency
domain. The 20-100 Hz part of the background carries a slowly wandering
level ("state" jitter, piecewise linear in dB between knots every few
seconds), which makes single 5 s segments ambiguous while hour averages
stay well separated. EPG hours additionally get

* a fixed gain over 20-100 Hz, and
* Hann-windowed sinusoid bursts (0.5-2 s) at the peak frequency and its
  harmonics, arriving as a Poisson process.

BL, EarlyCtrl and LateCtrl hours are all plain background. Randomness is
keyed on (seed, subject, phase, hour), so any hour can be regenerated alone.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .eeg_io import (
    GROUP_PHASES,
    DatasetManifest,
    EegRecord,
    ManifestEntry,
    atomic_write_text,
    write_manifest,
    write_record,
)

EPG_BAND_HZ = (20.0, 100.0)
_PHASE_CODE = {"BL": 0, "EPG": 1, "EarlyCtrl": 2, "LateCtrl": 3}


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    sampling_rate_hz: int = 512
    background_decay_exponent: float = 1.0
    epg_peak_hz: float = 22.0
    epg_harmonics: int = 2
    epg_band_gain_db: float = 4.0
    epg_event_rate_per_min: float = 6.0
    dropout_fraction: float = 0.01
    # free knobs; none of these are pinned down by the recordings
    background_rms_uv: float = 50.0
    burst_amplitude: float = 1.0
    state_jitter_db: float = 4.0
    state_period_s: float = 5.0
    subject_gain_jitter_db: float = 1.0
    dropout_mean_s: float = 2.0
    hour_seconds: float = 3600.0

    def validate(self) -> None:
        nyq = self.sampling_rate_hz / 2
        if self.sampling_rate_hz <= 0:
            raise ValueError("sampling_rate_hz must be positive")
        top = self.epg_peak_hz * (self.epg_harmonics + 1)
        if self.epg_harmonics < 0 or not 0 < self.epg_peak_hz or top >= nyq:
            raise ValueError(f"peak {self.epg_peak_hz} Hz and harmonics up to {top} Hz must stay below Nyquist {nyq}")
        if not 0 <= self.dropout_fraction < 1:
            raise ValueError(f"dropout_fraction must be in [0, 1), got {self.dropout_fraction}")
        if self.epg_event_rate_per_min < 0:
            raise ValueError("epg_event_rate_per_min must be >= 0")
        if self.hour_seconds <= 0 or self.state_period_s <= 0:
            raise ValueError("hour_seconds and state_period_s must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown SynthConfig keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def null(cls, **overrides) -> "SynthConfig":
        """No EPG signature at all: EPG hours are drawn like BL hours."""
        base = dict(epg_band_gain_db=0.0, epg_event_rate_per_min=0.0)
        base.update(overrides)
        return cls(**base)


def _key(*parts) -> list[int]:
    out = []
    for p in parts:
        if isinstance(p, str):
            out.append(zlib.crc32(p.encode("utf-8")))
        else:
            out.append(int(p) & 0xFFFFFFFF)
            out.append((int(p) >> 32) & 0xFFFFFFFF)
    return out


def _subject_gain_db(config: SynthConfig, subject_id: str) -> float:
    rng = np.random.default_rng(_key(config.seed, "subject", subject_id))
    return float(rng.normal(0.0, config.subject_gain_jitter_db))


def _background(rng, n, fs, alpha):
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    shape = np.maximum(freqs, 0.5) ** (-alpha / 2.0)
    shape[0] = 0.0
    spec = (rng.standard_normal(freqs.size) + 1j * rng.standard_normal(freqs.size)) * shape
    # std of irfft(spec) is (2/n) * sqrt(sum shape^2) for the interior bins
    norm = (2.0 / n) * np.sqrt(np.sum(shape[1:] ** 2))
    return freqs, spec / norm


def _state_gain(rng, n, fs, jitter_db, period_s):
    if jitter_db == 0:
        return np.ones(n)
    duration = n / fs
    offset = rng.uniform(0, period_s)
    knots_t = np.arange(-offset, duration + period_s, period_s)
    knots_db = rng.normal(0.0, jitter_db, knots_t.size)
    t = np.arange(n) / fs
    return 10.0 ** (np.interp(t, knots_t, knots_db) / 20.0)


def _bursts(rng, n, fs, config, amplitude):
    out = np.zeros(n)
    duration_min = n / fs / 60.0
    count = rng.poisson(config.epg_event_rate_per_min * duration_min)
    for _ in range(count):
        length = int(rng.uniform(0.5, 2.0) * fs)
        start = int(rng.integers(0, max(n - length, 1)))
        stop = min(start + length, n)
        t = np.arange(stop - start) / fs
        env = np.hanning(stop - start)
        wave = np.zeros(stop - start)
        for h in range(config.epg_harmonics + 1):
            f = config.epg_peak_hz * (h + 1)
            wave += np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi)) / (h + 1)
        out[start:stop] += amplitude * env * wave
    return out


def _dropout(rng, x, fs, fraction, mean_s):
    n = x.size
    target = int(round(fraction * n))
    lost = 0
    while lost < target:
        length = max(1, int(rng.exponential(mean_s) * fs))
        length = min(length, target - lost)
        start = int(rng.integers(0, n - length + 1))
        lost += int((~np.isnan(x[start : start + length])).sum())
        x[start : start + length] = np.nan
    return x


def generate_hour(config: SynthConfig, subject_id: str, phase: str, hour_index: int) -> EegRecord:
    config.validate()
    if phase not in _PHASE_CODE:
        raise ValueError(f"unknown phase {phase!r}")
    fs = config.sampling_rate_hz
    n = int(round(config.hour_seconds * fs))
    rng = np.random.default_rng(_key(config.seed, subject_id, _PHASE_CODE[phase], hour_index))
    scale = config.background_rms_uv * 10 ** (_subject_gain_db(config, subject_id) / 20.0)

    freqs, spec = _background(rng, n, fs, config.background_decay_exponent)
    band = (freqs >= EPG_BAND_HZ[0]) & (freqs <= EPG_BAND_HZ[1])
    epg = phase == "EPG"
    band_gain = 10 ** (config.epg_band_gain_db / 20.0) if epg else 1.0
    rest = np.fft.irfft(np.where(band, 0, spec), n)
    banded = np.fft.irfft(np.where(band, spec, 0), n) * band_gain
    state = _state_gain(rng, n, fs, config.state_jitter_db, config.state_period_s)
    x = scale * (rest + state * banded)
    if epg and config.epg_event_rate_per_min > 0:
        x += _bursts(rng, n, fs, config, config.burst_amplitude * scale)
    if config.dropout_fraction > 0:
        x = _dropout(rng, x, fs, config.dropout_fraction, config.dropout_mean_s)
    return EegRecord(subject_id, phase, hour_index, fs, x.astype(np.float32))


def subject_names(n_pps: int, n_ctrl: int) -> tuple[list[str], list[str]]:
    return [f"pps{i + 1:02d}" for i in range(n_pps)], [f"ctrl{i + 1:02d}" for i in range(n_ctrl)]


def generate_dataset(
    config: SynthConfig,
    n_pps_subjects: int,
    n_ctrl_subjects: int,
    hours_per_phase: int,
    out_dir,
    progress=None,
) -> DatasetManifest:
    """Write one record per (subject, phase, hour) plus ``manifest.json``.

    Control subjects get EarlyCtrl/LateCtrl hours from the same background
    distribution, so only their labels differ.
    """
    config.validate()
    if n_pps_subjects < 0 or n_ctrl_subjects < 0 or n_pps_subjects + n_ctrl_subjects < 1:
        raise ValueError("need at least one subject")
    if hours_per_phase < 1:
        raise ValueError("hours_per_phase must be >= 1")
    out_dir = Path(out_dir)
    rec_dir = out_dir / "records"
    rec_dir.mkdir(parents=True, exist_ok=True)
    pps, ctrl = subject_names(n_pps_subjects, n_ctrl_subjects)
    entries = []
    for group, subjects in (("PPS", pps), ("Control", ctrl)):
        for subject in subjects:
            for phase in GROUP_PHASES[group]:
                for hour in range(hours_per_phase):
                    path = rec_dir / f"{subject}_{phase}_{hour:03d}.eegr"
                    write_record(generate_hour(config, subject, phase, hour), path)
                    entries.append(ManifestEntry(subject, group, phase, hour, path))
                    if progress:
                        progress(path)
    manifest = DatasetManifest(entries, out_dir)
    write_manifest(manifest, out_dir / "manifest.json")
    atomic_write_text(out_dir / "synth_config.json", json.dumps(asdict(config), indent=2) + "\n")
    return manifest


def band_log_power_db(freqs: np.ndarray, log_power: np.ndarray, band=EPG_BAND_HZ) -> float:
    """Mean of 10*log10(PSD) over ``band`` given a log10 spectrum."""
    sel = (freqs >= band[0]) & (freqs <= band[1])
    return float(10.0 * np.mean(log_power[..., sel]))


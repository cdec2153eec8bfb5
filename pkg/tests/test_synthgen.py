import json

import numpy as np
import pytest

from epgdetect.eeg_io import load_manifest
from epgdetect.spectral import log_power_matrix, welch_log_power
from epgdetect.stats import rank_sum_test
from epgdetect.synthgen import SynthConfig, band_log_power_db, generate_dataset, generate_hour


def _spectrum(rec):
    x = rec.samples.astype(np.float64)
    x = np.nan_to_num(x - np.nanmean(x))
    return welch_log_power(x)


def _band_db(rec):
    s = _spectrum(rec)
    return band_log_power_db(s.frequencies_hz, s.log_power)


@pytest.fixture(scope="module")
def default_hours():
    cfg = SynthConfig()
    return generate_hour(cfg, "pps01", "BL", 0), generate_hour(cfg, "pps01", "EPG", 0)


def test_hour_length(default_hours):
    bl, _ = default_hours
    assert bl.n_samples == 3600 * 512
    assert bl.samples.dtype == np.float32


def test_epg_peaks_at_fundamental_and_harmonics(default_hours):
    _, epg = default_hours
    s = _spectrum(epg)
    assert s.frequencies_hz[1] - s.frequencies_hz[0] == 1.0
    for f in (22, 44, 66):
        i = int(np.flatnonzero(s.frequencies_hz == f)[0])
        assert s.log_power[i] > s.log_power[i - 1] and s.log_power[i] > s.log_power[i + 1], f


def test_bl_band_power_at_least_3db_below_epg(default_hours):
    bl, epg = default_hours
    assert _band_db(epg) - _band_db(bl) >= 3.0


def test_same_keys_same_samples():
    cfg = SynthConfig(hour_seconds=30)
    a = generate_hour(cfg, "pps02", "EPG", 5)
    b = generate_hour(cfg, "pps02", "EPG", 5)
    assert a.samples.tobytes() == b.samples.tobytes()
    c = generate_hour(cfg, "pps02", "EPG", 6)
    assert a.samples.tobytes() != c.samples.tobytes()


def test_band_contrast_monotone_in_gain():
    diffs = []
    for gain in (0.0, 2.0, 4.0, 8.0):
        cfg = SynthConfig(epg_band_gain_db=gain, hour_seconds=600)
        diffs.append(_band_db(generate_hour(cfg, "pps01", "EPG", 0)) - _band_db(generate_hour(cfg, "pps01", "BL", 0)))
    assert diffs[1] > 0
    assert all(b > a for a, b in zip(diffs, diffs[1:]))


def test_dropout_fraction_respected():
    cfg = SynthConfig(hour_seconds=600, dropout_fraction=0.05)
    rec = generate_hour(cfg, "ctrl01", "EarlyCtrl", 0)
    assert abs(rec.loss_fraction - 0.05) < 1e-3


@pytest.mark.parametrize("bad", [
    dict(epg_peak_hz=100.0, epg_harmonics=2),
    dict(dropout_fraction=1.0),
    dict(epg_event_rate_per_min=-1.0),
])
def test_invalid_config_rejected(bad):
    with pytest.raises(ValueError):
        SynthConfig(**bad).validate()


def test_from_dict_rejects_unknown_keys():
    assert SynthConfig.from_dict({"seed": 3}).seed == 3
    with pytest.raises(ValueError, match="unknown"):
        SynthConfig.from_dict({"sede": 3})


def test_dataset_entry_counts(tmp_path):
    cfg = SynthConfig(hour_seconds=5)
    m = generate_dataset(cfg, 7, 3, 25, tmp_path / "big")
    assert len(m) == 7 * 2 * 25 + 3 * 2 * 25 == 500
    loaded = load_manifest(tmp_path / "big" / "manifest.json")
    assert len(loaded) == 500
    assert json.loads((tmp_path / "big" / "synth_config.json").read_text())["hour_seconds"] == 5
    m1 = generate_dataset(cfg, 1, 0, 1, tmp_path / "one")
    assert len(m1) == 2
    with pytest.raises(ValueError):
        generate_dataset(cfg, 0, 0, 1, tmp_path / "none")


def _hour_power(cfg, subject, phase, hour):
    x = generate_hour(cfg, subject, phase, hour).samples.astype(np.float64)
    n = x.size // 2560
    segs = x[: n * 2560].reshape(n, 2560)
    segs = segs[~np.isnan(segs).any(axis=1)]
    freqs, spectra = log_power_matrix(segs)
    return band_log_power_db(freqs, spectra.mean(axis=0))


@pytest.mark.parametrize("cfg, subjects, phases", [
    (SynthConfig(hour_seconds=120), ("ctrl01", "ctrl02", "ctrl03"), ("EarlyCtrl", "LateCtrl")),
    (SynthConfig.null(hour_seconds=120), ("pps01", "pps02", "pps03"), ("BL", "EPG")),
])
def test_null_phases_show_no_band_difference(cfg, subjects, phases):
    """Hour-level band power (hours are independent draws), 12 hours per phase."""
    a = [_hour_power(cfg, s, phases[0], h) for s in subjects for h in range(4)]
    b = [_hour_power(cfg, s, phases[1], h) for s in subjects for h in range(4)]
    _, p = rank_sum_test(a, b)
    assert p > 0.05

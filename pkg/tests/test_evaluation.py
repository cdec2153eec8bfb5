import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from epgdetect.evaluation import (
    DEFAULT_WINDOWS,
    FPR_GRID,
    ScoreSet,
    aggregate,
    aggregation_sweep,
    format_duration,
    interpolate_roc,
    parse_duration,
    parse_windows,
    read_scores,
    roc_auc,
    roc_csv,
    score_segments,
    sen_spe,
    sweep_csv,
    write_scores,
)
from epgdetect.model import NetConfig, build
from epgdetect.preprocess import SegmentBatch


def make_scores(p_epg, labels=None, subject="s", hour=0, start=0, phase=None):
    p = np.asarray(p_epg, float)
    n = len(p)
    labels = np.zeros(n, int) if labels is None else np.asarray(labels)
    phases = [phase or ("EPG" if y else "BL") for y in labels]
    return ScoreSet([subject] * n, phases, np.full(n, hour), start + np.arange(n), np.c_[1 - p, p], labels)


def pair_auc(scores, labels):
    """Brute-force probability that a positive outranks a negative, ties count half."""
    s, y = np.asarray(scores), np.asarray(labels).astype(bool)
    pos, neg = s[y], s[~y]
    diff = pos[:, None] - neg[None, :]
    return ((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size


# -- durations ----------------------------------------------------------------------


@pytest.mark.parametrize("text,sec", [("5s", 5), ("30s", 30), ("2m", 120), ("60m", 3600), ("1h", 3600)])
def test_parse_duration(text, sec):
    assert parse_duration(text) == sec


@pytest.mark.parametrize("text", ["5", "1.5m", "0s", "3d", "", "m"])
def test_parse_duration_rejects(text):
    with pytest.raises(ValueError):
        parse_duration(text)


def test_windows_round_trip():
    secs = parse_windows(",".join(DEFAULT_WINDOWS))
    assert len(secs) == 9
    assert [format_duration(s) for s in secs] == ["5s", "30s", "1m", "2m", "5m", "10m", "20m", "30m", "1h"]


# -- aggregation --------------------------------------------------------------------


def test_aggregate_two_segments():
    agg = aggregate(make_scores([0.3, 0.5]), 10)
    np.testing.assert_allclose(agg.probs, [[0.6, 0.4]])


def test_aggregate_even_split():
    agg = aggregate(make_scores([0.5, 0.5]), 10)
    np.testing.assert_allclose(agg.probs, [[0.5, 0.5]])


def test_aggregate_three_segments():
    agg = aggregate(make_scores([0.1, 0.3, 0.8]), 15)
    np.testing.assert_allclose(agg.probs, [[0.6, 0.4]])
    assert agg.counts.tolist() == [3]


def test_aggregate_unit_window_is_identity():
    s = make_scores([0.2, 0.9, 0.4])
    agg = aggregate(s, 5)
    np.testing.assert_allclose(agg.probs, s.probs)


def test_windows_align_to_timeline_and_flag_coverage():
    # 12 segments per minute; hour 0 keeps slots 0..11 and 20..23
    s = make_scores(np.full(16, 0.7))
    s.segment_index[:] = np.r_[np.arange(12), np.arange(20, 24)]
    agg = aggregate(s, 60)
    assert agg.window_start.tolist() == [0, 12]
    assert agg.counts.tolist() == [12, 4]
    assert agg.low_coverage.tolist() == [False, True]
    # exactly half is enough
    s2 = make_scores(np.full(6, 0.7))
    assert not aggregate(s2, 60).low_coverage[0]


def test_windows_split_across_hours_and_groups():
    a = make_scores(np.full(720, 0.6), hour=0)
    b = make_scores(np.full(720, 0.6), hour=1)
    c = make_scores(np.full(720, 0.4), labels=np.ones(720), hour=0)
    agg = aggregate(ScoreSet.concat([a, b, c]), 3600)
    assert len(agg) == 3
    assert sorted(agg.window_start.tolist()) == [0, 0, 720]


def test_aggregate_rejects_bad_window():
    with pytest.raises(ValueError):
        aggregate(make_scores([0.5]), 7)
    with pytest.raises(ValueError):
        aggregate(make_scores([0.5, 0.5], labels=[0, 1], phase="BL"), 10)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=60), st.sampled_from([5, 10, 30, 60, 300]))
def test_aggregated_pairs_normalised(ps, window):
    agg = aggregate(make_scores(ps), window)
    np.testing.assert_allclose(agg.probs.sum(1), 1.0, atol=1e-12)
    assert agg.counts.sum() == len(ps)
    assert np.all((agg.scores >= min(ps) - 1e-12) & (agg.scores <= max(ps) + 1e-12))


# -- ROC ----------------------------------------------------------------------------


def test_roc_perfect_and_inverted():
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]).auc == 1.0
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0]).auc == 0.0


def test_roc_all_tied_is_half():
    r = roc_auc([0.5] * 6, [0, 1, 0, 1, 1, 0])
    assert r.auc == 0.5
    np.testing.assert_array_equal(r.fpr, [0, 1, 1])


def test_roc_single_class_raises():
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [1, 1])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.booleans()), min_size=2, max_size=50))
def test_auc_equals_pair_counting(data):
    s = np.array([d[0] for d in data], float) / 6
    y = np.array([d[1] for d in data])
    if y.all() or not y.any():
        return
    r = roc_auc(s, y)
    assert r.auc == pytest.approx(pair_auc(s, y), abs=1e-12)
    assert np.all(np.diff(r.fpr) >= 0) and np.all(np.diff(r.tpr) >= 0)
    assert r.fpr[0] == 0 and r.tpr[-1] == 1
    assert np.trapezoid(r.tpr, r.fpr) == pytest.approx(r.auc, abs=1e-12)


def test_auc_equals_normalised_u():
    rng = np.random.default_rng(0)
    s = np.round(rng.random(300), 2)
    y = rng.random(300) < 0.4
    from scipy.stats import mannwhitneyu

    u = mannwhitneyu(s[y], s[~y]).statistic
    assert roc_auc(s, y).auc == pytest.approx(u / (y.sum() * (~y).sum()), abs=1e-12)


def test_sen_spe_counts():
    s = np.r_[np.full(94, 0.9), np.full(6, 0.1), np.full(80, 0.2), np.full(20, 0.7)]
    y = np.r_[np.ones(100), np.zeros(100)]
    assert sen_spe(s, y) == (0.94, 0.8)


def test_sen_spe_threshold_endpoints():
    s, y = [0.0, 0.5, 1.0, 0.2], [1, 1, 0, 0]
    assert sen_spe(s, y, threshold=0.0) == (1.0, 0.0)
    assert sen_spe(s, y, threshold=1.0 + 1e-9) == (0.0, 1.0)
    assert sen_spe(s, y, threshold=0.5) == (0.5, 0.5)  # 0.5 counts as positive
    sen, spe = sen_spe([0.3], [0])
    assert math.isnan(sen) and spe == 1.0


def test_interpolated_roc_is_monotone_on_grid():
    rng = np.random.default_rng(1)
    r = roc_auc(rng.random(50), rng.random(50) < 0.5)
    curve = interpolate_roc(r)
    assert curve.shape == FPR_GRID.shape
    assert np.all(np.diff(curve) >= 0) and curve[-1] == 1.0


# -- sweeps ------------------------------------------------------------------------


def gaussian_subject(subject, d, hours, rng, sigma=0.01):
    """Per-segment EPG scores 0.5 + sigma * N(d * label, 1), full hours."""
    parts = []
    for label, phase in ((0, "BL"), (1, "EPG")):
        for h in range(hours):
            p = 0.5 + sigma * (rng.standard_normal(720) + d * label)
            s = make_scores(p, np.full(720, label), subject=subject, hour=h, phase=phase)
            parts.append(s)
    return ScoreSet.concat(parts)


def test_sweep_default_windows_rows():
    rng = np.random.default_rng(0)
    s = ScoreSet.concat([gaussian_subject(f"s{i}", 0.3, 1, rng) for i in range(2)])
    rows = aggregation_sweep(s, DEFAULT_WINDOWS)
    assert len(rows) == 9
    assert [len(r.per_fold) for r in rows] == [2] * 9
    assert sweep_csv(rows).count("\n") == 10
    assert len(aggregation_sweep(s, DEFAULT_WINDOWS, pooled=True)[0].per_fold) == 1
    # long-format ROC: each fold's points plus the 101-point mean
    text = roc_csv(rows[0].per_fold)
    assert sum(line.startswith("mean,") for line in text.splitlines()) == 101


@pytest.mark.parametrize("window_s", [5, 60, 300])
def test_sweep_follows_gaussian_law(window_s):
    d = 0.2
    rng = np.random.default_rng(window_s)
    s = gaussian_subject("s", d, 40, rng)
    n = window_s / 5
    expected = norm.cdf(d * math.sqrt(n) / math.sqrt(2))
    (row,) = aggregation_sweep(s, [window_s])
    assert row.mean_auc == pytest.approx(expected, abs=0.02)


def test_sweep_null_is_chance():
    rng = np.random.default_rng(9)
    s = ScoreSet.concat([gaussian_subject(f"s{i}", 0.0, 2, rng) for i in range(3)])
    rows = aggregation_sweep(s, ["5s", "1m"])
    assert abs(rows[0].mean_auc - 0.5) < 0.03
    assert abs(rows[1].mean_auc - 0.5) < 0.12


# -- score sets ------------------------------------------------------------------------


def test_score_csv_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    p = rng.random(20)
    s = make_scores(p, np.arange(20) % 2, subject="pps01")
    write_scores(s, tmp_path / "scores.csv")
    back = read_scores(tmp_path / "scores.csv")
    np.testing.assert_array_equal(back.probs, s.probs)
    assert back.subject_ids.tolist() == s.subject_ids.tolist()
    assert back.phases.tolist() == s.phases.tolist()
    np.testing.assert_array_equal(back.segment_index, s.segment_index)
    back.check()


def test_score_check_catches_problems():
    s = make_scores([0.2, 0.3])
    s.probs[0] = [0.5, 0.6]
    with pytest.raises(ValueError, match="sum to 1"):
        s.check()
    dup = ScoreSet.concat([make_scores([0.2]), make_scores([0.3])])
    with pytest.raises(ValueError, match="duplicate"):
        dup.check()


def test_score_segments_deterministic():
    cfg = NetConfig.toy(n_blocks=2, base_filters=4, input_len=64)
    model = build(cfg, seed=0)
    rng = np.random.default_rng(0)
    model.params["dense.weights"].value = rng.standard_normal(model.params["dense.weights"].value.shape).astype(np.float32)
    n = 10
    b = SegmentBatch(rng.standard_normal((n, 64)).astype(np.float32), np.arange(n) % 2, ["a"] * n, ["BL"] * n,
                     np.zeros(n, int), np.arange(n))
    s1, s2 = score_segments(model, b), score_segments(model, b, batch_size=3)
    np.testing.assert_allclose(s1.probs, s2.probs, atol=1e-6)
    s1.check()
    with pytest.raises(ValueError, match="expects"):
        score_segments(model, SegmentBatch(np.zeros((2, 32), np.float32), np.zeros(2), ["a"] * 2, ["BL"] * 2,
                                           np.zeros(2, int), np.arange(2)))

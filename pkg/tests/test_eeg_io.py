import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from epgdetect.eeg_io import (
    HEADER,
    DatasetManifest,
    EegRecord,
    FormatError,
    ManifestEntry,
    ManifestError,
    encode_record,
    load_manifest,
    read_record,
    write_manifest,
    write_record,
)

from conftest import record


def test_five_second_record_duration(tmp_path):
    p = tmp_path / "a.eegr"
    write_record(record(np.zeros(2560)), p)
    r = read_record(p)
    assert r.n_samples == 2560
    assert r.sampling_rate_hz == 512
    assert r.duration_s == 5.0


def test_header_layout_is_little_endian(tmp_path):
    data = encode_record(record(np.arange(3)))
    assert data[:4] == b"EEGR"
    assert HEADER.size == 20
    magic, version, rate, reserved, count = HEADER.unpack(data[:20])
    assert (version, rate, reserved, count) == (1, 512, 0, 3)
    assert np.array_equal(np.frombuffer(data[20:], "<f4"), [0, 1, 2])


def test_wrong_magic_names_field(tmp_path):
    p = tmp_path / "bad.eegr"
    data = bytearray(encode_record(record(np.zeros(10))))
    data[:4] = b"XXXX"
    p.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="magic"):
        read_record(p)


def test_truncated_payload_and_version(tmp_path):
    p = tmp_path / "t.eegr"
    p.write_bytes(encode_record(record(np.zeros(10)))[:-4])
    with pytest.raises(FormatError, match="sample_count"):
        read_record(p)
    data = bytearray(encode_record(record(np.zeros(10))))
    data[4:6] = (7).to_bytes(2, "little")
    p.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="version"):
        read_record(p)
    p.write_bytes(b"EEG")
    with pytest.raises(FormatError, match="header"):
        read_record(p)


def test_single_nan_round_trip(tmp_path):
    x = np.ones(100, np.float32)
    x[37] = np.nan
    p = tmp_path / "n.eegr"
    write_record(record(x), p)
    back = read_record(p).samples
    assert np.flatnonzero(np.isnan(back)).tolist() == [37]


def test_empty_record_rejected(tmp_path):
    p = tmp_path / "e.eegr"
    with pytest.raises(ValueError):
        write_record(record(np.zeros(0)), p)
    assert not p.exists()


def test_writes_are_byte_deterministic(tmp_path):
    r = record(np.random.default_rng(0).standard_normal(1000))
    write_record(r, tmp_path / "a")
    write_record(r, tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_invariants_enforced():
    with pytest.raises(ValueError):
        EegRecord("s", "BL", 0, 0, np.zeros(3))
    with pytest.raises(ValueError):
        EegRecord("s", "Seizure", 0, 512, np.zeros(3))
    with pytest.raises(ValueError):
        EegRecord("s", "BL", -1, 512, np.zeros(3))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.integers(1, 300), elements=st.floats(width=32, allow_nan=True, allow_infinity=True)))
def test_round_trip_is_bit_exact(tmp_path_factory, values):
    p = tmp_path_factory.mktemp("rt") / "r.eegr"
    r = EegRecord("s", "EPG", 3, 512, values)
    write_record(r, p)
    back = read_record(p, "s", "EPG", 3)
    assert back == r
    assert back.samples.tobytes() == values.astype("<f4").tobytes()


# -- manifests ---------------------------------------------------------------


def _manifest(tmp_path, rows):
    p = tmp_path / "manifest.json"
    p.write_text(json.dumps(rows))
    return p


def _rec_file(tmp_path, name):
    p = tmp_path / name
    write_record(record(np.zeros(16)), p)
    return name


def test_manifest_groups_seven_subjects(tmp_path):
    rows = []
    for s in range(7):
        for ph in ("BL", "EPG"):
            rows.append({"subject_id": f"p{s}", "group": "PPS", "phase": ph, "hour_index": 0,
                         "file": _rec_file(tmp_path, f"p{s}_{ph}.eegr")})
    rows.append({"subject_id": "c0", "group": "Control", "phase": "EarlyCtrl", "hour_index": 0,
                 "file": _rec_file(tmp_path, "c0.eegr")})
    m = load_manifest(_manifest(tmp_path, rows))
    assert len(m) == 15
    assert len(m.subjects("PPS")) == 7
    assert m.subjects("Control") == ["c0"]
    assert m.group_of("p3") == "PPS"
    assert [e.phase for e in m.hours("p2", "EPG")] == ["EPG"]


def test_manifest_reports_every_problem(tmp_path):
    f = _rec_file(tmp_path, "a.eegr")
    rows = [
        {"subject_id": "p0", "group": "PPS", "phase": "BL", "hour_index": 4, "file": f},
        {"subject_id": "p0", "group": "PPS", "phase": "BL", "hour_index": 4, "file": f},
        {"subject_id": "p1", "group": "PPS", "phase": "Ictal", "hour_index": 0, "file": f},
        {"subject_id": "p2", "group": "PPS", "phase": "EPG", "hour_index": 0, "file": "nope.eegr"},
    ]
    with pytest.raises(ManifestError) as exc:
        load_manifest(_manifest(tmp_path, rows))
    problems = exc.value.problems
    assert len(problems) == 3
    text = str(exc.value)
    assert "('p0', 'BL', 4)" in text
    assert "Ictal" in text
    assert "nope.eegr" in text


def test_manifest_phase_group_mismatch_and_header_check(tmp_path):
    (tmp_path / "junk.eegr").write_bytes(b"JUNKJUNKJUNKJUNKJUNKJUNK")
    rows = [
        {"subject_id": "c0", "group": "Control", "phase": "EPG", "hour_index": 0, "file": _rec_file(tmp_path, "x")},
        {"subject_id": "p0", "group": "PPS", "phase": "BL", "hour_index": 0, "file": "junk.eegr"},
    ]
    with pytest.raises(ManifestError) as exc:
        load_manifest(_manifest(tmp_path, rows))
    assert len(exc.value.problems) == 2


def test_manifest_load_is_pure_and_round_trips(tmp_path):
    entries = [ManifestEntry("p0", "PPS", ph, h, tmp_path / _rec_file(tmp_path, f"{ph}{h}"))
               for ph in ("BL", "EPG") for h in range(2)]
    path = tmp_path / "manifest.json"
    write_manifest(DatasetManifest(entries, tmp_path), path)
    a, b = load_manifest(path), load_manifest(path)
    assert a == b
    assert [e.key for e in a.entries] == [e.key for e in entries]
    assert all(not row["file"].startswith("/") for row in json.loads(path.read_text()))

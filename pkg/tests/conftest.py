import numpy as np
import pytest

from epgdetect.eeg_io import EegRecord
from epgdetect.synthgen import SynthConfig, generate_dataset


def sine(freq_hz, seconds, fs=512, amp=1.0):
    t = np.arange(int(seconds * fs)) / fs
    return amp * np.sin(2 * np.pi * freq_hz * t)


def record(samples, phase="BL", subject="s1", hour=0, fs=512):
    return EegRecord(subject, phase, hour, fs, np.asarray(samples, dtype=np.float32))


@pytest.fixture(scope="session")
def short_dataset(tmp_path_factory):
    """2 PPS + 2 control subjects, 2 one-minute "hours" per phase."""
    out = tmp_path_factory.mktemp("short")
    cfg = SynthConfig(hour_seconds=60.0)
    manifest = generate_dataset(cfg, 2, 2, 2, out)
    return out, manifest


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Record one PASS/FAIL line per acceptance criterion; printed in the summary."""

    def record(number, title, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'}  criterion {number:>2}: {title} ({detail})"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)

"""Reading and writing single-channel EEG records and dataset manifests.

Record file layout (little-endian)::

    b"EEGR" | u16 version (=1) | u32 sampling rate | u16 reserved | u64 n
    n x float32 samples, lost samples stored as quiet NaN

The header carries no provenance; subject, phase and hour come from the
manifest row that points at the file.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"EEGR"
VERSION = 1
HEADER = struct.Struct("<4sHIHQ")

PHASES = ("BL", "EPG", "EarlyCtrl", "LateCtrl")
GROUPS = ("PPS", "Control")
GROUP_PHASES = {"PPS": ("BL", "EPG"), "Control": ("EarlyCtrl", "LateCtrl")}
# label 1 = later phase (EPG for stimulated animals, LateCtrl for controls)
PHASE_LABEL = {"BL": 0, "EPG": 1, "EarlyCtrl": 0, "LateCtrl": 1}


class FormatError(ValueError):
    """A record file does not follow the EEGR layout."""


class ManifestError(ValueError):
    """Manifest validation failed; ``problems`` lists every violation."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid manifest:\n  " + "\n  ".join(self.problems))


@dataclass(eq=False)
class EegRecord:
    subject_id: str
    phase: str | None
    hour_index: int
    sampling_rate_hz: int
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype="<f4").reshape(-1)
        if self.sampling_rate_hz <= 0:
            raise ValueError(f"sampling_rate_hz must be positive, got {self.sampling_rate_hz}")
        if self.phase is not None and self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}; expected one of {PHASES}")
        if self.hour_index < 0:
            raise ValueError(f"hour_index must be >= 0, got {self.hour_index}")

    @property
    def n_samples(self) -> int:
        return int(self.samples.size)

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sampling_rate_hz

    @property
    def loss_fraction(self) -> float:
        if self.n_samples == 0:
            return 0.0
        return float(np.isnan(self.samples).mean())

    def with_samples(self, samples) -> "EegRecord":
        return EegRecord(self.subject_id, self.phase, self.hour_index, self.sampling_rate_hz, samples)

    def __eq__(self, other):
        # bit-exact, so NaN positions (and payloads) must match too
        if not isinstance(other, EegRecord):
            return NotImplemented
        return (
            self.subject_id == other.subject_id
            and self.phase == other.phase
            and self.hour_index == other.hour_index
            and self.sampling_rate_hz == other.sampling_rate_hz
            and self.samples.tobytes() == other.samples.tobytes()
        )


def encode_record(record: EegRecord) -> bytes:
    if record.n_samples == 0:
        raise ValueError("refusing to write a record with no samples")
    header = HEADER.pack(MAGIC, VERSION, record.sampling_rate_hz, 0, record.n_samples)
    return header + record.samples.astype("<f4", copy=False).tobytes()


def write_record(record: EegRecord, path) -> None:
    """Write ``record`` to ``path``. Output bytes depend only on the record."""
    atomic_write_bytes(path, encode_record(record))


def read_header(path) -> tuple[int, int]:
    """Return ``(sampling_rate_hz, sample_count)`` after validating the file."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(HEADER.size)
    if len(head) < HEADER.size:
        raise FormatError(f"{path}: header: truncated ({len(head)} of {HEADER.size} bytes)")
    magic, version, rate, _reserved, count = HEADER.unpack(head)
    if magic != MAGIC:
        raise FormatError(f"{path}: magic: expected {MAGIC!r}, found {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: version: unsupported value {version}")
    if rate == 0:
        raise FormatError(f"{path}: sampling_rate: must be positive")
    expected = HEADER.size + 4 * count
    actual = path.stat().st_size
    if actual != expected:
        raise FormatError(
            f"{path}: sample_count: header declares {count} samples "
            f"({expected} bytes) but file has {actual} bytes"
        )
    return rate, count


def read_record(path, subject_id: str = "", phase: str | None = None, hour_index: int = 0) -> EegRecord:
    rate, count = read_header(path)
    samples = np.fromfile(path, dtype="<f4", count=count, offset=HEADER.size)
    return EegRecord(subject_id, phase, hour_index, rate, samples)


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# -- manifests ---------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    subject_id: str
    group: str
    phase: str
    hour_index: int
    file: Path

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.subject_id, self.phase, self.hour_index)

    @property
    def label(self) -> int:
        return PHASE_LABEL[self.phase]

    def load(self) -> EegRecord:
        return read_record(self.file, self.subject_id, self.phase, self.hour_index)


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path = Path(".")

    def __len__(self):
        return len(self.entries)

    def subjects(self, group: str | None = None) -> list[str]:
        seen = dict.fromkeys(e.subject_id for e in self.entries if group is None or e.group == group)
        return sorted(seen)

    def group_of(self, subject_id: str) -> str:
        for e in self.entries:
            if e.subject_id == subject_id:
                return e.group
        raise KeyError(subject_id)

    def hours(self, subject_id: str, phase: str) -> list[ManifestEntry]:
        found = [e for e in self.entries if e.subject_id == subject_id and e.phase == phase]
        return sorted(found, key=lambda e: e.hour_index)

    def for_subject(self, subject_id: str) -> list[ManifestEntry]:
        found = [e for e in self.entries if e.subject_id == subject_id]
        return sorted(found, key=lambda e: (e.phase, e.hour_index))

    def to_json(self) -> str:
        rows = []
        for e in self.entries:
            try:
                rel = e.file.relative_to(self.root)
            except ValueError:
                rel = e.file
            rows.append(
                {
                    "subject_id": e.subject_id,
                    "group": e.group,
                    "phase": e.phase,
                    "hour_index": e.hour_index,
                    "file": rel.as_posix(),
                }
            )
        return json.dumps(rows, indent=1) + "\n"


def write_manifest(manifest: DatasetManifest, path) -> None:
    atomic_write_text(path, manifest.to_json())


def load_manifest(path) -> DatasetManifest:
    """Parse and validate a manifest, reporting every problem at once.

    Relative ``file`` entries resolve against the manifest's directory.
    """
    path = Path(path)
    root = path.parent
    try:
        rows = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError([f"{path}: not valid JSON ({exc})"]) from exc
    if not isinstance(rows, list):
        raise ManifestError([f"{path}: top level must be a JSON array"])

    problems = []
    entries = []
    seen = {}
    required = ("subject_id", "group", "phase", "hour_index", "file")
    for n, row in enumerate(rows):
        where = f"entry {n}"
        if not isinstance(row, dict):
            problems.append(f"{where}: not an object")
            continue
        missing = [k for k in required if k not in row]
        if missing:
            problems.append(f"{where}: missing keys {missing}")
            continue
        subject, group, phase, hour = row["subject_id"], row["group"], row["phase"], row["hour_index"]
        ok = True
        if group not in GROUPS:
            problems.append(f"{where}: unknown group {group!r}")
            ok = False
        if phase not in PHASES:
            problems.append(f"{where}: unknown phase label {phase!r}")
            ok = False
        elif group in GROUPS and phase not in GROUP_PHASES[group]:
            problems.append(f"{where}: phase {phase!r} not valid for group {group!r}")
            ok = False
        if not isinstance(hour, int) or isinstance(hour, bool) or hour < 0:
            problems.append(f"{where}: hour_index must be a non-negative integer, got {hour!r}")
            ok = False
        key = (subject, phase, hour)
        if key in seen:
            problems.append(f"{where}: duplicate key {key} (first seen at entry {seen[key]})")
            ok = False
        else:
            seen[key] = n
        file = Path(row["file"])
        if not file.is_absolute():
            file = root / file
        if not file.exists():
            problems.append(f"{where}: missing file {file}")
            ok = False
        else:
            try:
                read_header(file)
            except (FormatError, OSError) as exc:
                problems.append(f"{where}: unreadable record: {exc}")
                ok = False
        if ok:
            entries.append(ManifestEntry(subject, group, phase, hour, file))

    subject_groups = {}
    for e in entries:
        prev = subject_groups.setdefault(e.subject_id, e.group)
        if prev != e.group:
            problems.append(f"subject {e.subject_id!r} listed under both {prev!r} and {e.group!r}")
    if problems:
        raise ManifestError(problems)
    return DatasetManifest(entries, root)

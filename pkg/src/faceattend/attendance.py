"""Append-only attendance log with entry/exit pairing and CSV export.

Records live in a newline-delimited JSON file, one object per line, so an
interrupted write can lose at most the final line. Timestamps are naive
local times.
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass
from datetime import date, datetime
from pathlib import Path

from .errors import ValidationError

ENTRY = "Entry"
EXIT = "Exit"
EVENTS = (ENTRY, EXIT)
DEFAULT_COOLDOWN_S = 60.0
CSV_FIELDS = ("seq", "source_image", "name", "enrollment_no", "date", "time", "detection_ms", "event")


@dataclass(frozen=True)
class AttendanceRecord:
    seq: int
    source_image: str
    name: str
    enrollment_no: str
    timestamp: datetime
    detection_ms: float
    event: str = ENTRY

    def __post_init__(self):
        if not isinstance(self.seq, int) or self.seq < 1:
            raise ValidationError(f"seq must be a positive integer, got {self.seq!r}")
        if not self.detection_ms >= 0:
            raise ValidationError(f"detection_ms must be non-negative, got {self.detection_ms!r}")
        if self.event not in EVENTS:
            raise ValidationError(f"event must be one of {EVENTS}, got {self.event!r}")
        if not isinstance(self.timestamp, datetime):
            raise ValidationError("timestamp must be a datetime")

    @property
    def subject(self) -> str:
        return self.enrollment_no or self.name

    @property
    def day(self) -> date:
        return self.timestamp.date()

    def to_json(self) -> str:
        d = asdict(self)
        d["timestamp"] = self.timestamp.isoformat(timespec="microseconds")
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "AttendanceRecord":
        d = json.loads(line)
        d["timestamp"] = datetime.fromisoformat(d["timestamp"])
        return cls(**d)

    def report_line(self) -> str:
        t = self.timestamp
        return (f"{self.seq} | {self.source_image} | Date and Time: {t.month}/{t.day}/{t.year} "
                f"{t.hour}:{t.minute:02d} | Detection Time: {self.detection_ms:.3f}msec")


class AttendanceLog:
    """Single-writer attendance store.

    Parameters
    ----------
    path : path-like
        NDJSON file; created on first append, replayed when it exists.
    cooldown_s : float
        A subject seen again within this many seconds of their last logged
        event is not logged again.
    pairing : bool
        Alternate Entry/Exit per subject per day (first sighting is Entry).
        Without pairing every event is an Entry.
    fsync : bool
        Force each append to disk.
    """

    def __init__(self, path, cooldown_s: float = DEFAULT_COOLDOWN_S, pairing: bool = True, fsync: bool = True):
        if cooldown_s < 0:
            raise ValidationError("cooldown_s must be non-negative")
        self.path = Path(path)
        self.cooldown_s = float(cooldown_s)
        self.pairing = pairing
        self.fsync = fsync
        self.records: list[AttendanceRecord] = []
        self._last: dict[str, AttendanceRecord] = {}
        if self.path.exists():
            with self.path.open() as fh:
                for n, line in enumerate(fh, start=1):
                    if not line.strip():
                        continue
                    try:
                        rec = AttendanceRecord.from_json(line)
                    except (ValueError, TypeError, KeyError) as exc:
                        raise ValidationError(f"{self.path}:{n}: unreadable record") from exc
                    self._check_order(rec)
                    self._remember(rec)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(list(self.records))

    @property
    def next_seq(self) -> int:
        return self.records[-1].seq + 1 if self.records else 1

    def _check_order(self, rec: AttendanceRecord):
        if self.records:
            last = self.records[-1]
            if rec.seq <= last.seq:
                raise ValidationError(f"seq {rec.seq} does not follow {last.seq}")
            if rec.timestamp < last.timestamp:
                raise ValidationError(f"timestamp {rec.timestamp} precedes {last.timestamp}")

    def _remember(self, rec: AttendanceRecord):
        self.records.append(rec)
        self._last[rec.subject] = rec

    def append(self, rec: AttendanceRecord) -> int:
        """Durably append a fully formed record; returns its seq."""
        self._check_order(rec)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a") as fh:
            fh.write(rec.to_json() + "\n")
            fh.flush()
            if self.fsync:
                os.fsync(fh.fileno())
        self._remember(rec)
        return rec.seq

    def next_event(self, subject: str, when: datetime) -> str:
        last = self._last.get(subject)
        if not self.pairing or last is None or last.day != when.date():
            return ENTRY
        return EXIT if last.event == ENTRY else ENTRY

    def suppressed(self, subject: str, when: datetime) -> bool:
        last = self._last.get(subject)
        return last is not None and (when - last.timestamp).total_seconds() < self.cooldown_s

    def log(self, source_image: str, name: str, enrollment_no: str, timestamp: datetime | None = None,
            detection_ms: float = 0.0) -> AttendanceRecord | None:
        """Log a sighting; returns the new record, or None inside the cool-down."""
        when = timestamp or datetime.now()
        subject = enrollment_no or name
        if not subject:
            raise ValidationError("a record needs a name or enrollment number")
        if self.suppressed(subject, when):
            return None
        rec = AttendanceRecord(self.next_seq, source_image, name, enrollment_no, when, float(detection_ms),
                               self.next_event(subject, when))
        self.append(rec)
        return rec

    def report(self) -> list[str]:
        return [r.report_line() for r in self.records]


def export_csv(records, path) -> Path:
    """Write records with ISO-8601 date and time columns (RFC 4180 quoting)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(CSV_FIELDS)
        for r in records:
            w.writerow([r.seq, r.source_image, r.name, r.enrollment_no, r.timestamp.date().isoformat(),
                        r.timestamp.time().isoformat(timespec="microseconds"), repr(float(r.detection_ms)),
                        r.event])
    return path


def import_csv(path) -> list[AttendanceRecord]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_FIELDS:
            raise ValidationError(f"{path}: unexpected header {reader.fieldnames}")
        out = []
        for row in reader:
            ts = datetime.fromisoformat(f"{row['date']}T{row['time']}")
            out.append(AttendanceRecord(int(row["seq"]), row["source_image"], row["name"], row["enrollment_no"],
                                        ts, float(row["detection_ms"]), row["event"]))
    return out


__all__ = ["ENTRY", "EXIT", "AttendanceRecord", "AttendanceLog", "export_csv", "import_csv", "CSV_FIELDS"]

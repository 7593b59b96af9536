"""Outage, repair-log and weather records: file I/O, cleaning and splits.

File format
-----------
Each of the three record files is UTF-8 text.  Line 1 is a format header
``#outagecast-<kind> v1``; every following non-blank line is one JSON
object with the fields of the matching record type.  Timestamps are
written as ``YYYY-MM-DDTHH:MM:SS`` (naive local time); on input an
explicit UTC offset is accepted and converted to UTC.
"""

from __future__ import annotations

import bisect
import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from datetime import datetime, timezone

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
OUTAGE_FILE = "outages.jsonl"
LOG_FILE = "logs.jsonl"
WEATHER_FILE = "weather.jsonl"

LINE_TYPES = ("overhead", "underground")
CAUSES = ("equipment failure", "bird/animal", "tree/wind", "vehicle", "dig-in", "other")

WEATHER_FIELDS = (
    "temperature",
    "apparent_temperature",
    "cloud_cover",
    "dew_point",
    "humidity",
    "precip_intensity",
    "precip_probability",
    "pressure",
    "wind_speed",
)

MIN_DURATION_H = 5.0 / 60.0
MAX_DURATION_H = 24.0
TAIL_FRACTION = 0.975
MAX_BAD_FRACTION = 0.10


class DataError(ValueError):
    pass


def parse_time(text):
    dt = datetime.fromisoformat(str(text).replace("Z", "+00:00"))
    if dt.tzinfo is not None:
        dt = dt.astimezone(timezone.utc).replace(tzinfo=None)
    return dt


def format_time(dt):
    return dt.strftime("%Y-%m-%dT%H:%M:%S")


@dataclass(frozen=True)
class OutageRecord:
    id: str
    start: datetime
    end: datetime
    feeder: str
    line_type: str
    cause: str
    customers: int
    planned: bool = False

    def __post_init__(self):
        if self.end <= self.start:
            raise DataError(f"outage {self.id}: end must be after start")
        if self.customers < 0:
            raise DataError(f"outage {self.id}: negative customer count")
        if self.line_type not in LINE_TYPES:
            raise DataError(f"outage {self.id}: unknown line type {self.line_type!r}")

    @property
    def duration_h(self):
        return (self.end - self.start).total_seconds() / 3600.0


@dataclass(frozen=True)
class RepairLog:
    feeder: str
    time: datetime
    text: str


@dataclass(frozen=True)
class WeatherRow:
    time: datetime
    temperature: float
    apparent_temperature: float
    cloud_cover: float
    dew_point: float
    humidity: float
    precip_intensity: float
    precip_probability: float
    pressure: float
    wind_speed: float

    def __post_init__(self):
        for name in WEATHER_FIELDS:
            if not math.isfinite(getattr(self, name)):
                raise DataError(f"weather {format_time(self.time)}: {name} is not finite")

    def values(self):
        return [getattr(self, name) for name in WEATHER_FIELDS]


@dataclass(frozen=True)
class SplitSpec:
    train_end: datetime
    validation_end: datetime

    def __post_init__(self):
        if not self.train_end < self.validation_end:
            raise DataError("train_end must precede validation_end")


PAPER_SPLIT = SplitSpec(datetime(2014, 3, 15), datetime(2015, 3, 15))


@dataclass
class Corpus:
    outages: list
    logs: list
    weather: list


# ----------------------------------------------------------------------
# serialization
# ----------------------------------------------------------------------

_KINDS = {"outages": OutageRecord, "logs": RepairLog, "weather": WeatherRow}
_TIME_FIELDS = {"start", "end", "time"}


def _to_json(rec):
    d = asdict(rec)
    for k in _TIME_FIELDS & d.keys():
        d[k] = format_time(d[k])
    return json.dumps(d, ensure_ascii=False, sort_keys=False)


def _from_json(kind, obj):
    cls = _KINDS[kind]
    names = [f.name for f in fields(cls)]
    required = [f.name for f in fields(cls) if f.name != "planned"]
    missing = [n for n in required if n not in obj]
    if missing:
        raise DataError(f"missing field {missing[0]!r}")
    unknown = set(obj) - set(names)
    if unknown:
        raise DataError(f"unknown field {sorted(unknown)[0]!r}")
    kw = {}
    for n in names:
        if n not in obj:
            continue
        v = obj[n]
        if n in _TIME_FIELDS:
            try:
                v = parse_time(v)
            except (TypeError, ValueError):
                raise DataError(f"field {n!r}: bad timestamp {v!r}") from None
        elif n == "customers":
            if isinstance(v, bool) or not isinstance(v, int):
                raise DataError("field 'customers': expected integer")
        elif n == "planned":
            if not isinstance(v, bool):
                raise DataError("field 'planned': expected boolean")
        elif n in WEATHER_FIELDS:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise DataError(f"field {n!r}: expected number")
            v = float(v)
        elif not isinstance(v, str):
            raise DataError(f"field {n!r}: expected string")
        kw[n] = v
    return cls(**kw)


def write_records(path, kind, records):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"#outagecast-{kind} v{FORMAT_VERSION}\n")
        for rec in records:
            fh.write(_to_json(rec))
            fh.write("\n")


@dataclass
class LoadReport:
    path: str
    records: int = 0
    errors: list = None

    def __post_init__(self):
        if self.errors is None:
            self.errors = []


def read_records(path, kind):
    """Parse one record file, collecting per-line errors.

    Raises :class:`DataError` if the header is wrong or more than 10% of
    the data lines are malformed.
    """
    report = LoadReport(str(path))
    records = []
    with open(path, encoding="utf-8", errors="replace") as fh:
        header = fh.readline().strip()
        expected = f"#outagecast-{kind} v{FORMAT_VERSION}"
        if header != expected:
            raise DataError(f"{path}: line 1: expected header {expected!r}, got {header!r}")
        n_lines = 0
        for lineno, line in enumerate(fh, 2):
            if not line.strip():
                continue
            n_lines += 1
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise DataError("expected a JSON object")
                records.append(_from_json(kind, obj))
            except (DataError, json.JSONDecodeError, TypeError) as exc:
                report.errors.append((lineno, str(exc)))
    report.records = len(records)
    if n_lines and len(report.errors) > MAX_BAD_FRACTION * n_lines:
        first = "; ".join(f"line {n}: {msg}" for n, msg in report.errors[:3])
        raise DataError(f"{path}: {len(report.errors)} of {n_lines} lines malformed ({first})")
    for lineno, msg in report.errors:
        logger.warning("%s: line %d rejected: %s", path, lineno, msg)
    return records, report


def save_corpus(directory, corpus):
    from pathlib import Path

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_records(d / OUTAGE_FILE, "outages", corpus.outages)
    write_records(d / LOG_FILE, "logs", corpus.logs)
    write_records(d / WEATHER_FILE, "weather", corpus.weather)
    return [d / OUTAGE_FILE, d / LOG_FILE, d / WEATHER_FILE]


def load(outage_file, log_file, weather_file):
    """Load the three record files; returns ``(Corpus, [LoadReport, ...])``."""
    outages, r1 = read_records(outage_file, "outages")
    logs, r2 = read_records(log_file, "logs")
    weather, r3 = read_records(weather_file, "weather")
    return Corpus(outages, logs, weather), [r1, r2, r3]


def load_dir(directory):
    from pathlib import Path

    d = Path(directory)
    paths = [d / OUTAGE_FILE, d / LOG_FILE, d / WEATHER_FILE]
    for p in paths:
        if not p.exists():
            raise DataError(f"missing data file {p}")
    return load(*paths)


# ----------------------------------------------------------------------
# cleaning, alignment, splitting
# ----------------------------------------------------------------------


def filter_outages(records):
    """Unplanned outages lasting more than 5 minutes and at most 24 hours."""
    return [r for r in records
            if not r.planned and MIN_DURATION_H < r.duration_h <= MAX_DURATION_H]


def align_logs(outages, logs, tail=TAIL_FRACTION):
    """Attach logs to outages on the same feeder whose window contains them.

    Returns ``{outage_id: [RepairLog, ...]}`` (time-ordered) for outages that
    keep at least one log after dropping entries past ``tail`` of the
    duration.  When windows overlap, a log goes to the outage that started
    most recently before it.
    """
    by_feeder = {}
    for o in outages:
        by_feeder.setdefault(o.feeder, []).append(o)
    for lst in by_feeder.values():
        lst.sort(key=lambda o: (o.start, o.id))
    starts = {f: [o.start for o in lst] for f, lst in by_feeder.items()}
    longest = {f: max(o.end - o.start for o in lst) for f, lst in by_feeder.items()}
    attached = {}
    for log in logs:
        cands = by_feeder.get(log.feeder)
        if not cands:
            continue
        i = bisect.bisect_right(starts[log.feeder], log.time) - 1
        # walk back to the latest-starting outage whose window holds the log
        while i >= 0:
            o = cands[i]
            if o.start <= log.time <= o.end:
                break
            if log.time - o.start > longest[log.feeder]:
                i = -1
                break
            i -= 1
        if i < 0:
            continue
        o = cands[i]
        frac = (log.time - o.start).total_seconds() / 3600.0 / o.duration_h
        if frac > tail:
            continue
        attached.setdefault(o.id, []).append(log)
    for lst in attached.values():
        lst.sort(key=lambda lg: lg.time)
    return attached


def split_by_date(records, spec=PAPER_SPLIT):
    train, val, test = [], [], []
    for r in records:
        if r.start < spec.train_end:
            train.append(r)
        elif r.start < spec.validation_end:
            val.append(r)
        else:
            test.append(r)
    for name, part in (("train", train), ("validation", val), ("test", test)):
        if not part:
            logger.warning("split %s is empty", name)
    logger.info("split sizes: train=%d validation=%d test=%d", len(train), len(val), len(test))
    return train, val, test


def load_split_spec(path):
    """Read ``train_end = ...`` / ``validation_end = ...`` from a key-value file."""
    from .config import read_kv

    kv = read_kv(path)
    try:
        return SplitSpec(parse_time(kv["train_end"]), parse_time(kv["validation_end"]))
    except KeyError as exc:
        raise DataError(f"{path}: missing key {exc.args[0]}") from None

"""The 19 onset features, feeder statistics and standardization."""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass

import numpy as np

from .datastore import CAUSES, WEATHER_FIELDS, DataError

TIME_FEATURES = ("month", "day_of_week", "day_of_year", "hour", "weekend")
LOCATION_FEATURES = ("overhead", "feeder_mean_repair_h")
LOAD_FEATURES = ("log_customers", "outages_last_3h", "outages_last_8h")
FEATURE_NAMES = TIME_FEATURES + tuple(WEATHER_FIELDS) + LOCATION_FEATURES + LOAD_FEATURES
N_ONSET = len(FEATURE_NAMES)
CAUSE_NAMES = tuple(f"cause={c}" for c in CAUSES)

# ordinal time features are scaled to [0, 1) and left unstandardized
CYCLIC_DIMS = (0, 1, 2, 3)
BINARY_DIMS = (4, 14)

FEATURE_GROUPS = {
    "none": (),
    "time": tuple(range(0, 5)),
    "weather": tuple(range(5, 14)),
    "time+weather": tuple(range(0, 14)),
    "onset": tuple(range(N_ONSET)),
    "cause": tuple(range(N_ONSET, N_ONSET + len(CAUSES))),
    "cause+onset": tuple(range(N_ONSET + len(CAUSES))),
}

FEEDER_PSEUDO_COUNT = 10.0


@dataclass(frozen=True)
class FeederStats:
    counts: dict
    means: dict
    global_mean: float

    @classmethod
    def from_outages(cls, outages):
        """Build from the training split only."""
        if not outages:
            raise DataError("feeder statistics need at least one training outage")
        sums, counts = {}, {}
        for o in outages:
            sums[o.feeder] = sums.get(o.feeder, 0.0) + o.duration_h
            counts[o.feeder] = counts.get(o.feeder, 0) + 1
        means = {f: sums[f] / counts[f] for f in sums}
        total = sum(sums.values()) / sum(counts.values())
        return cls(counts, means, total)

    def to_dict(self):
        return {"counts": self.counts, "means": self.means, "global_mean": self.global_mean}

    @classmethod
    def from_dict(cls, d):
        return cls({k: int(v) for k, v in d["counts"].items()},
                   {k: float(v) for k, v in d["means"].items()}, float(d["global_mean"]))


def feeder_smoothed_mean(stats, feeder, pseudo_count=FEEDER_PSEUDO_COUNT):
    """Shrink the feeder's mean repair time toward the global mean."""
    n = stats.counts.get(feeder, 0)
    if n == 0:
        return stats.global_mean
    return (n * stats.means[feeder] + pseudo_count * stats.global_mean) / (n + pseudo_count)


class WeatherIndex:
    """Nearest-in-time lookup over weather rows; ties go to the earlier row."""

    def __init__(self, rows):
        self.rows = sorted(rows, key=lambda r: r.time)
        self.times = [r.time for r in self.rows]

    def nearest(self, t):
        if not self.rows:
            return None
        i = bisect.bisect_left(self.times, t)
        if i == 0:
            return self.rows[0]
        if i == len(self.rows):
            return self.rows[-1]
        before, after = self.rows[i - 1], self.rows[i]
        if after.time == t:
            return after
        if (t - before.time) <= (after.time - t):
            return before
        return after


class RecentIndex:
    """Counts outage starts in a trailing window, excluding the window end."""

    def __init__(self, starts):
        self.starts = sorted(starts)

    def count(self, t, hours):
        from datetime import timedelta

        lo = bisect.bisect_right(self.starts, t - timedelta(hours=hours))
        hi = bisect.bisect_left(self.starts, t)
        return max(0, hi - lo)


def extract(outage, weather, recent, stats, include_cause=False):
    """19-dim onset vector (plus a cause one-hot when ``include_cause``)."""
    if weather is None:
        raise DataError(f"outage {outage.id}: no weather row available")
    if outage.customers < 0:
        raise DataError(f"outage {outage.id}: negative customer count")
    t = outage.start
    doy = t.timetuple().tm_yday
    weekday = t.weekday()
    if isinstance(recent, RecentIndex):
        n3, n8 = recent.count(t, 3), recent.count(t, 8)
    else:
        idx = RecentIndex(recent)
        n3, n8 = idx.count(t, 3), idx.count(t, 8)
    vec = [
        (t.month - 1) / 12.0,
        weekday / 7.0,
        (doy - 1) / 366.0,
        t.hour / 24.0,
        1.0 if weekday >= 5 else 0.0,
        *weather.values(),
        1.0 if outage.line_type == "overhead" else 0.0,
        feeder_smoothed_mean(stats, outage.feeder),
        math.log1p(outage.customers),
        float(n3),
        float(n8),
    ]
    if include_cause:
        onehot = [0.0] * len(CAUSES)
        onehot[CAUSES.index(outage.cause)] = 1.0
        vec.extend(onehot)
    return np.array(vec, dtype=np.float64)


def feature_matrix(outages, weather_index, recent_index, stats, include_cause=False):
    if not outages:
        width = N_ONSET + (len(CAUSES) if include_cause else 0)
        return np.zeros((0, width))
    return np.stack([
        extract(o, weather_index.nearest(o.start), recent_index, stats, include_cause)
        for o in outages
    ])


@dataclass(frozen=True)
class StandardizationStats:
    mean: np.ndarray
    std: np.ndarray
    exempt: tuple

    @classmethod
    def fit(cls, X, exempt=None):
        X = np.asarray(X, dtype=np.float64)
        if exempt is None:
            exempt = tuple(i for i in CYCLIC_DIMS + BINARY_DIMS if i < X.shape[1])
            if X.shape[1] > N_ONSET:
                exempt += tuple(range(N_ONSET, X.shape[1]))
        mean = X.mean(axis=0)
        std = np.maximum(X.std(axis=0), 1e-6)
        mean[list(exempt)] = 0.0
        std[list(exempt)] = 1.0
        return cls(mean, std, tuple(exempt))

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "exempt": list(self.exempt)}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["mean"]), np.array(d["std"]), tuple(d["exempt"]))


def standardize(v, s):
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != s.mean.shape[0]:
        raise DataError(f"feature width {v.shape[-1]} does not match statistics width {s.mean.shape[0]}")
    return (v - s.mean) / s.std


def unstandardize(v, s):
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != s.mean.shape[0]:
        raise DataError(f"feature width {v.shape[-1]} does not match statistics width {s.mean.shape[0]}")
    return v * s.std + s.mean


def select(X, group):
    """Columns for a named feature group (see ``FEATURE_GROUPS``)."""
    try:
        cols = FEATURE_GROUPS[group]
    except KeyError:
        raise ValueError(f"unknown feature group {group!r}; choose from {sorted(FEATURE_GROUPS)}") from None
    return X[:, list(cols)]

"""Seeded synthetic outage corpus.

The generator plants the structure the models are meant to find:

* causes depend on season, hour, weekday, wind and line type (birds in
  summer mornings/evenings, trees in windy winters, vehicles late at night);
* durations come from cause-specific Gammas, scaled by a feeder factor and
  a customer-count factor that both have mean one, so the per-cause mean
  stays at ``shape * scale``;
* outages cluster in windy hours, so recent-outage counts carry signal;
* repair logs after the first mention the cause keyword with a configured
  probability.

Everything is drawn from independent child streams of one ``SeedSequence``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from datetime import datetime, timedelta

import numpy as np
from scipy.signal import lfilter

from .config import coerce, read_kv
from .datastore import CAUSES, Corpus, OutageRecord, RepairLog, WeatherRow, format_time

CAUSE_KEYS = ("equipment", "bird", "tree", "vehicle", "digin", "other")
CAUSE_BY_KEY = dict(zip(CAUSE_KEYS, CAUSES))

DEFAULT_KEYWORDS = {
    "equipment": ("blown", "failed", "burnt"),
    "bird": ("crow", "bird", "squirrel"),
    "tree": ("tree", "limb", "branch"),
    "vehicle": ("car", "vehicle", "truck"),
    "digin": ("digin", "excavator", "backhoe"),
    "other": ("vandalism", "fire", "balloon"),
}

OPENING_TEMPLATES = (
    "{crew} reports lights out at {addr}.",
    "Trouble call: power out, {fdr} locked out.",
    "Customer reports no power near {tp}.",
    "Dispatched {crew} to investigate outage on {fdr}.",
    "Lights out @ {addr}; {crew} to respond.",
    "{fdr} tripped, {crew} en route.",
)

CAUSE_TEMPLATES = (
    "Found {kw} on {tp}, {filler}.",
    "{kw} at {pole}. {filler}.",
    "{crew} on site: {kw} near {addr}.",
    "Patrolled {fdr}, {kw} on line. {filler}.",
    "{filler}; {kw} found at {tp}.",
)

FILLERS = (
    "duty supervisor notified",
    "need nurd",
    "crew on site",
    "requests clearance",
    "slsvc to respond",
    "part out",
    "26kv cables checked",
    "to investigate further",
    "waiting on line crew",
    "switching in progress",
    "sectionalizer open",
    "patrol continuing",
)

FILLER_TEMPLATES = (
    "{filler} at {tp}.",
    "{crew}: {filler}, {filler2}.",
    "{filler} on {fdr}.",
    "Update - {filler}. {filler2} at {addr}.",
)

CLOSING_TEMPLATE = "CL {clnum} created."

CREWS = ("Crew 12", "J Smith", "Line crew", "Troubleman", "Duty supervisor", "Crew 7")
STREETS = ("Cherry", "Jackson", "Union", "Pine", "Madison", "Spring", "Marion")
STREET_KINDS = ("St", "Av", "Way", "Pl")


class GenConfigError(ValueError):
    pass


def _cause_dict(values):
    return dict(zip(CAUSE_KEYS, values))


@dataclass(frozen=True)
class GenConfig:
    n_outages: int = 800
    start: str = "2006-01-01"
    end: str = "2016-06-01"
    n_feeders: int = 80
    underground_fraction: float = 0.35
    planned_fraction: float = 0.03
    orphan_log_fraction: float = 0.05
    priors: dict = field(default_factory=lambda: _cause_dict((0.40, 0.15, 0.18, 0.08, 0.07, 0.12)))
    shapes: dict = field(default_factory=lambda: _cause_dict((2.0, 2.5, 2.0, 3.0, 2.0, 1.5)))
    scales: dict = field(default_factory=lambda: _cause_dict((2.0, 0.5, 3.5, 1.7, 1.5, 2.0)))
    feeder_sigma: float = 0.35
    customer_effect: float = 0.2
    context_effect: float = 1.0
    customers_log_mean: float = 3.8
    customers_log_sd: float = 1.1
    log_count_weights: tuple = (0.10, 0.20, 0.25, 0.20, 0.15, 0.10)
    keyword_prob: float = 0.85
    closing_prob: float = 0.5
    keywords: dict = field(default_factory=lambda: dict(DEFAULT_KEYWORDS))

    def validate(self):
        if self.n_outages < 1:
            raise GenConfigError("n_outages must be >= 1")
        if set(self.priors) != set(CAUSE_KEYS):
            raise GenConfigError(f"priors must cover exactly {CAUSE_KEYS}")
        if any(p < 0 for p in self.priors.values()) or abs(sum(self.priors.values()) - 1.0) > 1e-9:
            raise GenConfigError("cause priors must be non-negative and sum to 1")
        w = self.log_count_weights
        if len(w) != 6 or any(x < 0 for x in w) or abs(sum(w) - 1.0) > 1e-9:
            raise GenConfigError("log_count_weights must be 6 probabilities summing to 1")
        for name in ("underground_fraction", "planned_fraction", "orphan_log_fraction",
                     "keyword_prob", "closing_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise GenConfigError(f"{name} must be a probability")
        for key in CAUSE_KEYS:
            if self.shapes[key] <= 0 or self.scales[key] <= 0:
                raise GenConfigError(f"gamma parameters for {key} must be positive")
            if not self.keywords.get(key):
                raise GenConfigError(f"no keywords for cause {key}")
        if datetime.fromisoformat(self.end) <= datetime.fromisoformat(self.start):
            raise GenConfigError("end must be after start")
        return self

    def cause_mean(self, key):
        return self.shapes[key] * self.scales[key]


def load_gen_config(path):
    """Read a key-value generator config.

    Scalar keys use the field name (``n_outages = 800``); per-cause keys are
    ``prior.<cause>``, ``shape.<cause>``, ``scale.<cause>`` and
    ``keywords.<cause>`` (comma separated), with causes from ``CAUSE_KEYS``.
    """
    kv = read_kv(path)
    base = GenConfig()
    updates = {}
    per_cause = {"prior": dict(base.priors), "shape": dict(base.shapes),
                 "scale": dict(base.scales), "keywords": dict(base.keywords)}
    plain = {f.name: f for f in fields(GenConfig)}
    for key, value in kv.items():
        group, dot, cause = key.partition(".")
        if dot:
            if group not in per_cause or cause not in CAUSE_KEYS:
                raise GenConfigError(f"unknown config key {key!r}")
            if group == "keywords":
                per_cause[group][cause] = tuple(v.strip() for v in value.split(",") if v.strip())
            else:
                per_cause[group][cause] = float(value)
        elif key in plain and key not in ("priors", "shapes", "scales", "keywords"):
            updates[key] = coerce(value, getattr(base, key))
        else:
            raise GenConfigError(f"unknown config key {key!r}")
    cfg = replace(base, priors=per_cause["prior"], shapes=per_cause["shape"],
                  scales=per_cause["scale"], keywords=per_cause["keywords"], **updates)
    return cfg.validate()


# ----------------------------------------------------------------------
# weather
# ----------------------------------------------------------------------


def _ar1(rng, n, phi, sigma):
    e = rng.standard_normal(n) * sigma
    return lfilter([1.0], [1.0, -phi], e)


def _winter(doy):
    # 1 in mid-January, 0 in mid-July
    return 0.5 * (1.0 + np.cos(2.0 * np.pi * (doy - 15.0) / 365.25))


def generate_weather(start, n_hours, rng):
    """Hourly weather at one location, as a dict of 1-d arrays."""
    t0 = np.datetime64(start, "h")
    stamps = t0 + np.arange(n_hours).astype("timedelta64[h]")
    days = stamps.astype("datetime64[D]")
    doy = (days - days.astype("datetime64[Y]")).astype(int) + 1
    hour = (stamps - days).astype(int)
    winter = _winter(doy)
    temp = (11.0 - 7.0 * np.cos(2.0 * np.pi * (doy - 15.0) / 365.25)
            + 4.0 * np.sin(2.0 * np.pi * (hour - 9.0) / 24.0)
            + _ar1(rng, n_hours, 0.97, 0.6))
    log_wind = 1.7 + 0.5 * winter + _ar1(rng, n_hours, 0.95, 0.11)
    wind = np.exp(log_wind)
    cloud_latent = -0.3 + 1.2 * winter + 0.08 * (wind - 7.0) + _ar1(rng, n_hours, 0.9, 0.45)
    cloud = 1.0 / (1.0 + np.exp(-cloud_latent))
    precip_prob = np.clip(cloud ** 2 + 0.05 * rng.standard_normal(n_hours), 0.0, 1.0)
    precip_int = precip_prob * 0.08 * np.exp(0.5 * rng.standard_normal(n_hours))
    spread = np.clip(1.5 + 6.0 * (1.0 - cloud) + 0.8 * rng.standard_normal(n_hours), 0.0, None)
    dew = temp - spread
    humidity = np.clip(np.exp(-spread / 14.0), 0.0, 1.0)
    apparent = temp - 0.25 * np.maximum(wind - 3.0, 0.0) * (temp < 15) + 0.1 * humidity * (temp > 22)
    pressure = 1016.0 - 0.7 * (wind - 7.0) + _ar1(rng, n_hours, 0.98, 0.7)
    return {
        "time": stamps,
        "temperature": temp,
        "apparent_temperature": apparent,
        "cloud_cover": cloud,
        "dew_point": dew,
        "humidity": humidity,
        "precip_intensity": precip_int,
        "precip_probability": precip_prob,
        "pressure": pressure,
        "wind_speed": wind,
    }


# ----------------------------------------------------------------------
# causes and durations
# ----------------------------------------------------------------------


def cause_probabilities(cfg, month, hour, weekday, wind, temperature, underground):
    """Cause distribution (ordered as ``CAUSE_KEYS``) for one outage context."""
    w = dict(cfg.priors)
    summer = month in (5, 6, 7, 8)
    winter = month in (11, 12, 1, 2)
    bird_hours = 5 <= hour <= 8 or 16 <= hour <= 19
    w["bird"] *= (3.0 if summer else 0.4) * (3.0 if bird_hours else 0.5) * (0.15 if underground else 1.0)
    w["tree"] *= ((2.5 if winter else 0.6) * float(np.clip(math.exp(0.12 * (wind - 8.0)), 0.2, 8.0))
                  * (0.15 if underground else 1.0))
    w["vehicle"] *= (3.0 if hour >= 22 or hour <= 3 else 0.6) * (2.0 if weekday >= 5 else 1.0)
    workday = 8 <= hour <= 16 and weekday < 5
    w["digin"] *= (3.0 if underground else 0.3) * (1.5 if workday else 0.3)
    w["equipment"] *= (1.5 if underground else 1.0) * (1.0 + 0.03 * max(temperature - 20.0, 0.0))
    p = np.array([w[k] for k in CAUSE_KEYS])
    return p / p.sum()


def duration_factors(cfg, latent_customers, feeder_factor):
    """Mean-one multiplier from customer count and feeder difficulty."""
    g = cfg.customer_effect
    return feeder_factor * np.exp(g * latent_customers - 0.5 * g * g)


def context_factor(cfg, hour, weekday, wind, temperature):
    """Repair-time multiplier from onset conditions.

    Night call-outs, weekend staffing, storm backlog and frost all slow
    crews down; ``cfg.context_effect`` scales the log-effect (0 disables).
    """
    log_f = 0.0
    if hour >= 22 or hour < 6:
        log_f += 0.4
    if weekday >= 5:
        log_f += 0.18
    log_f += 0.12 * (min(wind, 20.0) - 8.0)
    if temperature < 2.0:
        log_f += 0.25
    return math.exp(cfg.context_effect * log_f)


def sample_cause_durations(cfg, cause_key, n, rng):
    """Durations (hours) for one cause, with feeder and customer factors.

    Mirrors the generator's sampling path; the mean equals the configured
    ``shape * scale``.
    """
    base = rng.gamma(cfg.shapes[cause_key], cfg.scales[cause_key], size=n)
    sigma = cfg.feeder_sigma
    feeder = np.exp(sigma * rng.standard_normal(n) - 0.5 * sigma * sigma)
    latent = rng.standard_normal(n)
    return base * duration_factors(cfg, latent, feeder)


# ----------------------------------------------------------------------
# text
# ----------------------------------------------------------------------


def _ids(rng):
    return {
        "tp": f"TP {rng.integers(100, 999)}",
        "pole": f"P-{rng.integers(100, 999)}",
        "fdr": f"FDR {rng.integers(2600, 2700)}",
        "addr": f"{rng.integers(100, 2000)} {rng.choice(['S', 'N', 'E', 'W'])} "
                f"{rng.choice(STREETS)} {rng.choice(STREET_KINDS)}",
        "crew": str(rng.choice(CREWS)),
    }


def _log_text(rng, cfg, cause_key, index, frac):
    ids = _ids(rng)
    f1, f2 = rng.choice(len(FILLERS), size=2, replace=False)
    ids["filler"] = FILLERS[f1]
    ids["filler2"] = FILLERS[f2]
    if index == 0:
        text = OPENING_TEMPLATES[rng.integers(len(OPENING_TEMPLATES))].format(**ids)
        keyword = None
    elif rng.random() < cfg.keyword_prob:
        kws = cfg.keywords[cause_key]
        keyword = str(kws[rng.integers(len(kws))])
        ids["kw"] = keyword
        text = CAUSE_TEMPLATES[rng.integers(len(CAUSE_TEMPLATES))].format(**ids)
    else:
        text = FILLER_TEMPLATES[rng.integers(len(FILLER_TEMPLATES))].format(**ids)
        keyword = None
    if frac > 0.85 and rng.random() < cfg.closing_prob:
        text = f"{text} {CLOSING_TEMPLATE.format(clnum=rng.integers(10000, 99999))}"
    return text, keyword


# ----------------------------------------------------------------------
# corpus
# ----------------------------------------------------------------------


def generate_synthetic(cfg=None, seed=0):
    """Build a :class:`Corpus` plus per-outage ground truth.

    Returns ``(corpus, truth)`` where ``truth[outage_id]`` records the cause
    key and the planted keyword of each log (``None`` when absent).
    """
    cfg = (cfg or GenConfig()).validate()
    ss = np.random.SeedSequence(seed)
    r_weather, r_feeder, r_outage, r_logs, r_orphan = (np.random.default_rng(s) for s in ss.spawn(5))

    start = datetime.fromisoformat(cfg.start)
    end = datetime.fromisoformat(cfg.end)
    n_hours = int((end - start).total_seconds() // 3600)
    wx = generate_weather(cfg.start, n_hours, r_weather)
    for name in wx:
        if name != "time":
            wx[name] = np.round(wx[name], 3)

    # feeders: fixed line type and a difficulty factor with mean one per type
    n_f = cfg.n_feeders
    feeder_names = [f"FDR-{2601 + i}" for i in range(n_f)]
    underground = r_feeder.random(n_f) < cfg.underground_fraction
    fac = np.exp(cfg.feeder_sigma * r_feeder.standard_normal(n_f))
    for mask in (underground, ~underground):
        if mask.any():
            fac[mask] /= fac[mask].mean()

    # outage hours weighted by wind: storms bring clusters of outages
    rate = np.exp(0.08 * (wx["wind_speed"] - 7.0))
    hours = np.sort(r_outage.choice(n_hours, size=cfg.n_outages, p=rate / rate.sum()))
    minutes = r_outage.integers(0, 60, size=cfg.n_outages)
    feeders = r_outage.integers(0, n_f, size=cfg.n_outages)
    latent_c = r_outage.standard_normal(cfg.n_outages)
    customers = np.clip(np.round(np.exp(cfg.customers_log_mean + cfg.customers_log_sd * latent_c)), 0, 20000)
    planned = r_outage.random(cfg.n_outages) < cfg.planned_fraction
    cause_u = r_outage.random(cfg.n_outages)

    outages, logs, truth = [], [], {}
    log_counts = np.arange(1, 7)
    for i in range(cfg.n_outages):
        h = int(hours[i])
        t_start = start + timedelta(hours=h, minutes=int(minutes[i]))
        f = int(feeders[i])
        probs = cause_probabilities(
            cfg, t_start.month, t_start.hour, t_start.weekday(),
            float(wx["wind_speed"][h]), float(wx["temperature"][h]), bool(underground[f]))
        c = int(np.searchsorted(np.cumsum(probs), cause_u[i] * probs.sum(), side="right"))
        c = min(c, len(CAUSE_KEYS) - 1)
        key = CAUSE_KEYS[c]
        base = r_outage.gamma(cfg.shapes[key], cfg.scales[key])
        dur_h = float(base * duration_factors(cfg, latent_c[i], fac[f])
                      * context_factor(cfg, t_start.hour, t_start.weekday(),
                                       float(wx["wind_speed"][h]), float(wx["temperature"][h])))
        dur_s = max(60, int(round(dur_h * 3600)))
        t_end = t_start + timedelta(seconds=dur_s)
        oid = f"OUT-{i + 1:06d}"
        outages.append(OutageRecord(
            id=oid, start=t_start, end=t_end, feeder=feeder_names[f],
            line_type="underground" if underground[f] else "overhead",
            cause=CAUSES[c], customers=int(customers[i]), planned=bool(planned[i])))
        n_logs = int(r_logs.choice(log_counts, p=cfg.log_count_weights))
        fracs = np.sort(r_logs.random(n_logs))
        planted = []
        for j, frac in enumerate(fracs):
            text, kw = _log_text(r_logs, cfg, key, j, frac)
            t_log = t_start + timedelta(seconds=int(frac * dur_s))
            logs.append(RepairLog(feeder=feeder_names[f], time=t_log, text=text))
            planted.append(kw)
        truth[oid] = {"cause": key, "keywords": planted}

    n_orphan = int(round(cfg.orphan_log_fraction * len(logs)))
    for _ in range(n_orphan):
        h = int(r_orphan.integers(n_hours))
        t_log = start + timedelta(hours=h, minutes=int(r_orphan.integers(60)))
        text = FILLER_TEMPLATES[r_orphan.integers(len(FILLER_TEMPLATES))].format(
            **_ids(r_orphan), filler=FILLERS[r_orphan.integers(len(FILLERS))],
            filler2=FILLERS[r_orphan.integers(len(FILLERS))])
        logs.append(RepairLog(feeder=feeder_names[int(r_orphan.integers(n_f))], time=t_log, text=text))
    logs.sort(key=lambda lg: (lg.time, lg.feeder, lg.text))

    times = wx["time"].astype("datetime64[s]").astype(datetime)
    weather = [
        WeatherRow(time=times[j], **{name: float(wx[name][j]) for name in wx if name != "time"})
        for j in range(n_hours)
    ]
    return Corpus(outages, logs, weather), truth


def truth_keyword_set(cfg=None):
    cfg = cfg or GenConfig()
    return {kw for kws in cfg.keywords.values() for kw in kws}


__all__ = [
    "CAUSE_KEYS",
    "GenConfig",
    "GenConfigError",
    "cause_probabilities",
    "format_time",
    "generate_synthetic",
    "generate_weather",
    "load_gen_config",
    "sample_cause_durations",
]

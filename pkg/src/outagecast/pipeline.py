"""Glue from raw records to model-ready arrays, and experiment drivers."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import datastore as ds
from . import features as ft
from . import textprep as tp
from .evalreport import metrics, per_report_metrics
from .gammadist import GammaParams
from .training import OutageExample, TrainConfig, train_initial, train_realtime

logger = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")
FEATURE_TABLE_GROUPS = ("none", "time", "weather", "time+weather", "onset", "cause+onset")


@dataclass
class SplitData:
    outages: list
    X: np.ndarray               # standardized, cause one-hot appended
    durations: np.ndarray
    examples: list = field(default_factory=list)   # outages with logs only
    reports: dict = field(default_factory=dict)    # id -> [(TokenSeq, elapsed)]


@dataclass
class Prepared:
    splits: dict
    vocab: tp.Vocab
    feeder_stats: ft.FeederStats
    std: ft.StandardizationStats
    n_dropped_outages: int = 0

    def __getitem__(self, name):
        return self.splits[name]


def _elapsed_h(outage, log):
    return (log.time - outage.start).total_seconds() / 3600.0


def prepare(corpus, spec=ds.PAPER_SPLIT, vocab_cutoff=2, rules=None, vocab=None):
    """Filter, align, split, featurize and encode a corpus.

    Feeder statistics, standardization and the vocabulary are fit on the
    training split only.  Pass ``vocab`` to reuse a trained model's
    vocabulary instead of building one.
    """
    kept = ds.filter_outages(corpus.outages)
    if not kept:
        raise ds.DataError("no outages survive filtering")
    aligned = ds.align_logs(kept, corpus.logs)
    train, val, test = ds.split_by_date(kept, spec)
    if not train:
        raise ds.DataError("training split is empty")
    stats = ft.FeederStats.from_outages(train)
    wx = ft.WeatherIndex(corpus.weather)
    recent = ft.RecentIndex([o.start for o in corpus.outages])
    raw = {name: ft.feature_matrix(part, wx, recent, stats, include_cause=True)
           for name, part in zip(SPLITS, (train, val, test))}
    std = ft.StandardizationStats.fit(raw["train"])

    texts = {}
    for o in kept:
        for lg in aligned.get(o.id, []):
            texts.setdefault(id(lg), tp.normalize(lg.text, rules) + [tp.END])
    if vocab is None:
        train_docs = [texts[id(lg)] for o in train for lg in aligned.get(o.id, [])]
        if not train_docs:
            raise ds.DataError("no repair logs attach to training outages")
        vocab = tp.build_vocab(train_docs, vocab_cutoff)

    splits = {}
    for name, part in zip(SPLITS, (train, val, test)):
        X = ft.standardize(raw[name], std) if len(part) else raw[name]
        d = np.array([o.duration_h for o in part], dtype=np.float64)
        sd = SplitData(part, X, d)
        for i, o in enumerate(part):
            logs = aligned.get(o.id, [])
            if not logs:
                continue
            reps = [(tp.encode_log(lg.text, vocab, rules), _elapsed_h(o, lg)) for lg in logs]
            sd.reports[o.id] = reps
            sd.examples.append(OutageExample(
                o.id, X[i, :ft.N_ONSET].copy(), o.duration_h,
                [(seq.ids, t) for seq, t in reps]))
        splits[name] = sd
    return Prepared(splits, vocab, stats, std, len(corpus.outages) - len(kept))


# ----------------------------------------------------------------------
# experiments
# ----------------------------------------------------------------------


def feature_table(prep, config: TrainConfig, groups=FEATURE_TABLE_GROUPS, split="test"):
    """Train one initial predictor per feature group; returns MetricRows."""
    tr, va, te = prep["train"], prep["validation"], prep[split]
    rows, models = [], {}
    for g in groups:
        res = train_initial((ft.select(tr.X, g), tr.durations),
                            (ft.select(va.X, g), va.durations), config)
        k, th = res.model.predict_batch(ft.select(te.X, g))
        preds = [GammaParams(a, b) for a, b in zip(k, th)]
        rows.append(metrics(preds, te.durations, split, g))
        models[g] = res
    return rows, models


def sequence_predictions(initial, group, realtime, split: SplitData, target="remaining"):
    """Per-outage prediction and target sequences for outages with logs.

    Entry 0 is the initial predictor's total-duration forecast; entry j is
    the real-time prediction after log j.
    """
    idx = {o.id: i for i, o in enumerate(split.outages)}
    seqs, truths = [], []
    for ex in split.examples:
        i = idx[ex.id]
        k, th = initial.predict_batch(ft.select(split.X[i:i + 1], group))
        first = GammaParams(float(k[0]), float(th[0]))
        rest, _ = realtime.predict(ex.features, ex.logs)
        seqs.append([first] + rest)
        truths.append([ex.duration_h] + ex.targets(target))
    return seqs, truths


def report_curve(initial, group, realtime, split: SplitData, target="remaining", max_reports=3):
    seqs, truths = sequence_predictions(initial, group, realtime, split, target)
    return per_report_metrics(seqs, truths, max_reports)


def train_both(prep, config: TrainConfig, group="onset"):
    """Initial predictor on ``group`` plus the real-time model."""
    tr, va = prep["train"], prep["validation"]
    init = train_initial((ft.select(tr.X, group), tr.durations),
                         (ft.select(va.X, group), va.durations), config)
    rt = train_realtime(tr.examples, va.examples, config, len(prep.vocab))
    return init, rt


def with_overrides(config, **kw):
    return replace(config, **{k: v for k, v in kw.items() if v is not None})

"""Metrics, per-report curves, the least-squares baseline and attention exports."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .gammadist import GammaParams, mean as gamma_mean, mode as gamma_mode, nll_array, quantile

RIDGE = 1e-6
SMOOTH_WINDOW = 3


class EvalError(ValueError):
    pass


# ----------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class MetricRow:
    dataset: str
    feature_set: str
    nll: float
    rmse: float
    corr: float                  # Pearson x 100
    corr_defined: bool = True    # False when either vector has zero variance
    n: int = 0


def pearson(x, y):
    """Two-pass Pearson correlation; returns ``(r, defined)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(np.dot(xc, xc))
    syy = float(np.dot(yc, yc))
    if sxx <= 0.0 or syy <= 0.0:
        return 0.0, False
    r = float(np.dot(xc, yc)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r)), True


def _param_arrays(predictions):
    k = np.array([p.k for p in predictions], dtype=np.float64)
    theta = np.array([p.theta for p in predictions], dtype=np.float64)
    return k, theta


def metrics(predictions, truths, dataset="", feature_set=""):
    """NLL, RMSE of the Gamma mean and Pearson (x100) against ``truths``."""
    truths = np.asarray(truths, dtype=np.float64)
    if len(predictions) != len(truths):
        raise EvalError(f"{len(predictions)} predictions for {len(truths)} truths")
    if len(truths) == 0:
        raise EvalError("metrics need at least one prediction")
    k, theta = _param_arrays(predictions)
    nll = float(nll_array(truths, k, theta).mean())
    point = k * theta
    rmse = float(np.sqrt(np.mean((point - truths) ** 2)))
    r, ok = pearson(point, truths)
    return MetricRow(dataset, feature_set, nll, rmse, 100.0 * r, ok, len(truths))


def write_metric_rows(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset", "feature_set", "n", "nll", "rmse_h", "corr_x100", "corr_defined"])
        for r in rows:
            w.writerow([r.dataset, r.feature_set, r.n, f"{r.nll:.6f}", f"{r.rmse:.6f}",
                        f"{r.corr:.3f}", int(r.corr_defined)])


# ----------------------------------------------------------------------
# per-report curve
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class ReportCountRow:
    reports: int
    n: int
    nll: float
    rmse: float


def per_report_metrics(sequences, truths, max_reports=3):
    """Metrics after 0..``max_reports`` reports on outages with enough logs.

    ``sequences[i]`` is ``[initial, after log 1, after log 2, ...]`` and
    ``truths[i]`` the matching targets.  Only outages with at least
    ``max_reports`` logs are used, the same subset for every row.
    """
    if len(sequences) != len(truths):
        raise EvalError("sequences and truths differ in length")
    keep = [i for i, s in enumerate(sequences) if len(s) >= max_reports + 1]
    if not keep:
        raise EvalError(f"no outages with at least {max_reports} repair logs")
    rows = []
    for j in range(max_reports + 1):
        preds = [sequences[i][j] for i in keep]
        tg = [truths[i][j] for i in keep]
        if len(truths[keep[0]]) <= j:
            raise EvalError("truth sequences shorter than prediction sequences")
        m = metrics(preds, tg)
        rows.append(ReportCountRow(j, len(keep), m.nll, m.rmse))
    return rows


def write_per_report(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["reports", "n", "nll", "rmse_h"])
        for r in rows:
            w.writerow([r.reports, r.n, f"{r.nll:.6f}", f"{r.rmse:.6f}"])


# ----------------------------------------------------------------------
# least-squares baseline
# ----------------------------------------------------------------------


@dataclass
class BaselineResult:
    coef: np.ndarray
    intercept: float
    predictions: np.ndarray
    rmse: float = math.nan
    corr: float = math.nan


def linear_baseline(X_train, y_train, X_test, y_test=None, ridge=RIDGE):
    """Least squares with a tiny ridge (intercept unpenalized)."""
    X = np.asarray(X_train, dtype=np.float64)
    y = np.asarray(y_train, dtype=np.float64)
    Xt = np.asarray(X_test, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y) or len(y) == 0:
        raise EvalError("baseline needs a non-empty 2-d training matrix matching the targets")
    A = np.hstack([np.ones((len(X), 1)), X])
    M = A.T @ A
    pen = np.full(A.shape[1], ridge)
    pen[0] = 0.0
    M[np.diag_indices_from(M)] += pen
    if np.linalg.cond(M) > 1e14:
        raise EvalError("baseline design matrix is rank-deficient even with the ridge floor")
    w = np.linalg.solve(M, A.T @ y)
    pred = w[0] + Xt @ w[1:]
    res = BaselineResult(w[1:], float(w[0]), pred)
    if y_test is not None:
        yt = np.asarray(y_test, dtype=np.float64)
        res.rmse = float(np.sqrt(np.mean((pred - yt) ** 2)))
        r, _ = pearson(pred, yt)
        res.corr = 100.0 * r
    return res


# ----------------------------------------------------------------------
# attention
# ----------------------------------------------------------------------


def smooth(weights, window=SMOOTH_WINDOW):
    """Centered moving average with mirrored edges (edge values repeated).

    Mirroring the edge sample makes the smoothed weights sum to exactly the
    raw total.
    """
    w = np.asarray(weights, dtype=np.float64)
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    half = window // 2
    if len(w) == 0 or half == 0:
        return w.copy()
    padded = np.pad(w, half, mode="symmetric")
    kernel = np.full(window, 1.0 / window)
    return np.convolve(padded, kernel, mode="valid")


@dataclass
class AttentionExport:
    outage_id: str
    report: int
    tokens: tuple
    offsets: tuple
    raw: list        # one array per head
    smoothed: list

    def records(self):
        for h, (raw, sm) in enumerate(zip(self.raw, self.smoothed)):
            for i, tok in enumerate(self.tokens):
                a, b = self.offsets[i] if i < len(self.offsets) else (0, 0)
                yield {"outage": self.outage_id, "report": self.report, "position": i,
                       "token": tok, "offset": [int(a), int(b)], "head": h,
                       "raw": float(raw[i]), "smoothed": float(sm[i])}


def attention_export(model, outage_id, features, reports, window=SMOOTH_WINDOW):
    """Per-report attention weights for one outage.

    ``reports`` is a time-ordered list of ``(TokenSeq, elapsed hours)``.
    """
    if not reports:
        return []
    logs = [(seq.ids, t) for seq, t in reports]
    _, alphas = model.predict(features, logs)
    out = []
    for j, ((seq, _), heads) in enumerate(zip(reports, alphas)):
        raw = [np.asarray(a, dtype=np.float64) for a in heads]
        out.append(AttentionExport(outage_id, j + 1, tuple(seq.tokens), tuple(seq.offsets),
                                   raw, [smooth(a, window) for a in raw]))
    return out


def write_attention(path, exports):
    with open(path, "w", encoding="utf-8") as fh:
        for ex in exports:
            for rec in ex.records():
                fh.write(json.dumps(rec, ensure_ascii=False))
                fh.write("\n")


def top_bigrams(exports, n_heads=None):
    """Bigrams around each report's most-attended token, counted per head.

    Returns one list per head of ``((left, right), count)`` sorted by count
    descending, ties broken alphabetically.
    """
    if n_heads is None:
        n_heads = max((len(e.raw) for e in exports), default=0)
    counters = [Counter() for _ in range(n_heads)]
    for e in exports:
        toks = e.tokens
        for h, raw in enumerate(e.raw[:n_heads]):
            if len(toks) < 2:
                continue
            i = int(np.argmax(raw))
            if i > 0:
                counters[h][(toks[i - 1], toks[i])] += 1
            if i + 1 < len(toks):
                counters[h][(toks[i], toks[i + 1])] += 1
    return [sorted(c.items(), key=lambda kv: (-kv[1], kv[0])) for c in counters]


def write_bigrams(path, tables, top=None):
    depth = max((len(t) for t in tables), default=0)
    if top is not None:
        depth = min(depth, top)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        header = ["rank"]
        for h in range(len(tables)):
            header += [f"head{h + 1}_bigram", f"head{h + 1}_count"]
        w.writerow(header)
        for r in range(depth):
            row = [r + 1]
            for t in tables:
                if r < len(t):
                    (a, b), c = t[r]
                    row += [f"{a} {b}", c]
                else:
                    row += ["", ""]
            w.writerow(row)


# ----------------------------------------------------------------------
# customer-facing rows
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class ReportRow:
    elapsed: float
    k: float
    theta: float
    mode: float
    mean: float
    q80: float


def report_row(p: GammaParams, elapsed=0.0):
    """Mode, mean and 80th percentile of the predicted time remaining."""
    return ReportRow(float(elapsed), p.k, p.theta, gamma_mode(p), gamma_mean(p), quantile(0.8, p))

"""Command-line entry point for the outage-duration pipeline.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import fields, replace
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import bundle
from . import datastore as ds
from . import features as ft
from . import numcore as nc
from . import textprep as tp
from .config import coerce, read_kv, write_kv
from .evalreport import (AttentionExport, attention_export, linear_baseline, metrics,
                         per_report_metrics, report_row, top_bigrams, write_attention,
                         write_bigrams, write_metric_rows, write_per_report)
from .gammadist import GammaParamError, GammaParams
from .pipeline import FEATURE_TABLE_GROUPS, feature_table, prepare, sequence_predictions
from .synthetic import GenConfig, GenConfigError, generate_synthetic, load_gen_config
from .training import (SearchSpace, TrainConfig, TrainingError, random_search, train_initial,
                       train_realtime, write_history, write_leaderboard)

logger = logging.getLogger("outagecast")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ----------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_json(path, obj):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _train_config(args):
    """Resolve TrainConfig: CLI flag > config file > default."""
    values = {}
    if args.config:
        kv = read_kv(args.config)
        defaults = TrainConfig()
        for f in fields(TrainConfig):
            if f.name in kv:
                try:
                    values[f.name] = coerce(kv[f.name], getattr(defaults, f.name))
                except ValueError as exc:
                    raise UsageError(f"{args.config}: {f.name}: {exc}") from None
    for name in ("seed", "target", "heads", "max_epochs", "lr", "dropout", "patience"):
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    try:
        return TrainConfig(**values)
    except TrainingError as exc:
        raise UsageError(str(exc)) from None


def _split_spec(args):
    return ds.load_split_spec(args.split_spec) if args.split_spec else ds.PAPER_SPLIT


def _load_corpus(args, run):
    if not args.data_dir:
        raise UsageError("--data-dir is required")
    corpus, reports = ds.load_dir(args.data_dir)
    for r in reports:
        run.inputs[r.path] = _sha256(r.path)
    return corpus


def _group(args):
    if args.features:
        return args.features
    return "cause+onset" if args.include_cause else "onset"


class Run:
    """Collects manifest fields while a subcommand runs."""

    def __init__(self, args):
        self.args = args
        self.out = Path(args.out) if getattr(args, "out", None) else None
        self.inputs = {}
        self.artifacts = []
        self.config = {}
        self.started = time.time()

    def path(self, name):
        if self.out is None:
            raise UsageError("--out is required")
        self.out.mkdir(parents=True, exist_ok=True)
        p = self.out / name
        self.artifacts.append(str(p))
        return p

    def manifest(self, outcome):
        if self.out is None:
            return
        self.out.mkdir(parents=True, exist_ok=True)
        cmd = self.args.command
        _atomic_json(self.out / f"manifest-{cmd}.json", {
            "subcommand": cmd,
            "config": self.config,
            "inputs": self.inputs,
            "seed": getattr(self.args, "seed", None),
            "artifacts": self.artifacts,
            "wall_clock_s": round(time.time() - self.started, 3),
            "outcome": outcome,
            "argv": self.args.argv,
        })


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------


def cmd_gen_data(args, run):
    cfg = load_gen_config(args.config) if args.config else GenConfig()
    if args.n_outages is not None:
        cfg = replace(cfg, n_outages=args.n_outages)
    seed = 0 if args.seed is None else args.seed
    run.config = {"generator": {k: v for k, v in vars(cfg).items()}, "seed": seed}
    corpus, truth = generate_synthetic(cfg, seed=seed)
    run.path(ds.OUTAGE_FILE), run.path(ds.LOG_FILE), run.path(ds.WEATHER_FILE)
    ds.save_corpus(run.out, corpus)
    with open(run.path("truth.json"), "w", encoding="utf-8") as fh:
        json.dump(truth, fh, sort_keys=True)
    print(f"wrote {len(corpus.outages)} outages, {len(corpus.logs)} logs, "
          f"{len(corpus.weather)} weather rows to {run.out}")


def cmd_train_initial(args, run):
    cfg = _train_config(args)
    group = _group(args)
    run.config = {"train": cfg.to_dict(), "features": group}
    corpus = _load_corpus(args, run)
    prep = prepare(corpus, _split_spec(args), cfg.vocab_cutoff)
    tr, va = prep["train"], prep["validation"]
    res = train_initial((ft.select(tr.X, group), tr.durations),
                        (ft.select(va.X, group), va.durations), cfg)
    bundle.save_initial(run.path(bundle.INITIAL_FILE), res.model, group, prep.std,
                        prep.feeder_stats, cfg)
    write_history(run.path("history-initial.csv"), res.history)
    print(f"initial model ({group}): best validation NLL {res.best_validation_nll:.4f} "
          f"at epoch {res.best_epoch}")


def cmd_train_realtime(args, run):
    cfg = _train_config(args)
    run.config = {"train": cfg.to_dict()}
    corpus = _load_corpus(args, run)
    prep = prepare(corpus, _split_spec(args), cfg.vocab_cutoff)
    res = train_realtime(prep["train"].examples, prep["validation"].examples, cfg, len(prep.vocab))
    bundle.save_realtime(run.path(bundle.REALTIME_FILE), res.model, prep.vocab, prep.std,
                         prep.feeder_stats, cfg)
    prep.vocab.save(run.path("vocab.txt"))
    write_history(run.path("history-realtime.csv"), res.history)
    print(f"real-time model: best validation NLL {res.best_validation_nll:.4f} "
          f"at epoch {res.best_epoch}; {res.skipped_steps} skipped steps")


def cmd_search(args, run):
    base = _train_config(args)
    corpus = _load_corpus(args, run)
    spec = _split_spec(args)
    preps = {}

    def train_fn(cfg):
        if cfg.vocab_cutoff not in preps:
            preps[cfg.vocab_cutoff] = prepare(corpus, spec, cfg.vocab_cutoff)
        p = preps[cfg.vocab_cutoff]
        return train_realtime(p["train"].examples, p["validation"].examples, cfg,
                              len(p.vocab)).best_validation_nll

    rng = np.random.default_rng(base.seed)
    best, board = random_search(SearchSpace(), args.trials, rng, train_fn, base)
    run.config = {"base": base.to_dict(), "trials": args.trials, "best": best.to_dict()}
    write_leaderboard(run.path("leaderboard.csv"), board)
    write_kv(run.path("best-config.txt"), best.to_dict())
    print(f"best of {args.trials} trials: validation NLL {board[0].validation_nll:.4f}")


def _load_models(args, run):
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    ck = Path(args.checkpoint)
    init, init_meta = bundle.load_initial(ck / bundle.INITIAL_FILE)
    rt, vocab, rt_meta = bundle.load_realtime(ck / bundle.REALTIME_FILE)
    for name in (bundle.INITIAL_FILE, bundle.REALTIME_FILE):
        run.inputs[str(ck / name)] = _sha256(ck / name)
    return init, init_meta, rt, vocab, rt_meta


def cmd_evaluate(args, run):
    init, init_meta, rt, vocab, rt_meta = _load_models(args, run)
    target = rt_meta["train_config"]["target"]
    group = init_meta["group"]
    corpus = _load_corpus(args, run)
    prep = prepare(corpus, _split_spec(args), vocab=vocab)
    tr, te = prep["train"], prep["test"]
    run.config = {"features": group, "target": target}

    k, th = init.predict_batch(ft.select(te.X, group))
    rows = [metrics([GammaParams(a, b) for a, b in zip(k, th)], te.durations, "test", group)]
    base = linear_baseline(ft.select(tr.X, "onset"), tr.durations,
                           ft.select(te.X, "onset"), te.durations)
    if args.feature_table:
        cfg = TrainConfig.from_dict(init_meta["train_config"])
        rows, _ = feature_table(prep, cfg, FEATURE_TABLE_GROUPS)
    write_metric_rows(run.path("metrics.csv"), rows)
    with open(run.path("baseline.csv"), "w", encoding="utf-8") as fh:
        fh.write("dataset,model,rmse_h,corr_x100\n")
        fh.write(f"test,least_squares_onset,{base.rmse:.6f},{base.corr:.3f}\n")

    seqs, truths = sequence_predictions(init, group, rt, te, target)
    curve = per_report_metrics(seqs, truths)
    write_per_report(run.path("per-report.csv"), curve)
    for r in rows:
        print(f"{r.feature_set:>12}: NLL {r.nll:.4f}  RMSE {r.rmse:.3f} h  corr {r.corr:.1f}")
    print(f"least squares: RMSE {base.rmse:.3f} h  corr {base.corr:.1f}")
    for r in curve:
        print(f"after {r.reports} reports (n={r.n}): NLL {r.nll:.4f}  RMSE {r.rmse:.3f} h")


def _exports(rt, split):
    out = []
    for ex in split.examples:
        out.extend(attention_export(rt, ex.id, ex.features, split.reports[ex.id]))
    return out


def cmd_attention(args, run):
    _, _, rt, vocab, _ = _load_models(args, run)
    corpus = _load_corpus(args, run)
    prep = prepare(corpus, _split_spec(args), vocab=vocab)
    exports = _exports(rt, prep[args.split])
    write_attention(run.path("attention.jsonl"), exports)
    print(f"exported attention for {len(exports)} reports")


def read_attention(path):
    """Rebuild AttentionExport objects from an ``attention.jsonl`` file."""
    groups = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
                key = (r["outage"], int(r["report"]))
                g = groups.setdefault(key, {})
                g.setdefault(int(r["head"]), {})[int(r["position"])] = (
                    r["token"], tuple(r["offset"]), float(r["raw"]), float(r["smoothed"]))
            except (KeyError, ValueError, TypeError) as exc:
                raise ds.DataError(f"{path}:{lineno}: bad attention record ({exc})") from None
    exports = []
    for (oid, rep), heads in groups.items():
        first = heads[min(heads)]
        n = len(first)
        tokens = tuple(first[i][0] for i in range(n))
        offsets = tuple(first[i][1] for i in range(n))
        raw = [np.array([heads[h][i][2] for i in range(n)]) for h in sorted(heads)]
        sm = [np.array([heads[h][i][3] for i in range(n)]) for h in sorted(heads)]
        exports.append(AttentionExport(oid, rep, tokens, offsets, raw, sm))
    return exports


def cmd_bigrams(args, run):
    if not args.attention:
        raise UsageError("--attention is required")
    run.inputs[args.attention] = _sha256(args.attention)
    exports = read_attention(args.attention)
    tables = top_bigrams(exports)
    write_bigrams(run.path("bigrams.csv"), tables, top=args.top)
    for h, t in enumerate(tables):
        head = ", ".join(f"{a} {b} ({c})" for (a, b), c in t[:5])
        print(f"head {h + 1}: {head}")


def _format_rows(rows):
    lines = ["report\telapsed_h\tk\ttheta_h\tmode_h\tmean_h\tq80_h"]
    for i, r in enumerate(rows):
        lines.append(f"{i}\t{r.elapsed:.2f}\t{r.k:.4f}\t{r.theta:.4f}\t{r.mode:.2f}\t{r.mean:.2f}\t{r.q80:.2f}")
    return "\n".join(lines)


def cmd_report(args, run):
    init, init_meta, rt, vocab, _ = _load_models(args, run)
    corpus = _load_corpus(args, run)
    prep = prepare(corpus, _split_spec(args), vocab=vocab)
    for name in ("test", "validation", "train"):
        split = prep[name]
        ids = [o.id for o in split.outages]
        if args.outage_id in ids:
            break
    else:
        raise ds.DataError(f"outage {args.outage_id!r} not found after filtering")
    i = ids.index(args.outage_id)
    group = init_meta["group"]
    k, th = init.predict_batch(ft.select(split.X[i:i + 1], group))
    rows = [report_row(GammaParams(float(k[0]), float(th[0])), 0.0)]
    reps = split.reports.get(args.outage_id, [])
    if reps:
        preds, _ = rt.predict(split.X[i, :ft.N_ONSET], [(s.ids, t) for s, t in reps])
        rows += [report_row(p, t) for p, (_, t) in zip(preds, reps)]
    text = _format_rows(rows)
    with open(run.path("report.tsv"), "w", encoding="utf-8") as fh:
        fh.write(text + "\n")
    print(text)


def _read_outage(spec):
    text = Path(spec).read_text(encoding="utf-8") if os.path.exists(spec) else spec
    try:
        obj = json.loads(text)
        return SimpleNamespace(
            id=str(obj.get("id", "query")), start=ds.parse_time(obj["start"]),
            feeder=str(obj["feeder"]), line_type=str(obj["line_type"]),
            customers=int(obj["customers"]), cause=obj.get("cause", ds.CAUSES[-1]))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ds.DataError(f"bad --outage description ({exc})") from None


def cmd_predict(args, run):
    init, init_meta, rt, vocab, _ = _load_models(args, run)
    if not args.outage:
        raise UsageError("--outage is required")
    outage = _read_outage(args.outage)
    corpus = _load_corpus(args, run)
    std, stats = bundle.preprocessing(init_meta)
    vec = ft.extract(outage, ft.WeatherIndex(corpus.weather).nearest(outage.start),
                     ft.RecentIndex([o.start for o in corpus.outages if o.start < outage.start]),
                     stats, include_cause=True)
    f = ft.standardize(vec, std)
    k, th = init.predict_batch(ft.select(f[None, :], init_meta["group"]))
    rows = [report_row(GammaParams(float(k[0]), float(th[0])), 0.0)]
    print(_format_rows(rows), flush=True)
    logs = []
    stream = sys.stdin if args.logs == "-" else open(args.logs, encoding="utf-8")
    with stream:
        for lineno, line in enumerate(stream, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            elapsed, sep, text = line.partition("\t")
            try:
                t = float(elapsed)
            except ValueError:
                raise ds.DataError(f"log line {lineno}: expected '<elapsed hours>\\t<text>'") from None
            if not sep or t < 0:
                raise ds.DataError(f"log line {lineno}: expected '<elapsed hours>\\t<text>'")
            if logs and t < logs[-1][1]:
                raise ds.DataError(f"log line {lineno}: logs must arrive in time order")
            logs.append((tp.encode_log(text, vocab).ids, t))
            preds, _ = rt.predict(f[:ft.N_ONSET], logs)
            rows.append(report_row(preds[-1], t))
            r = rows[-1]
            print(f"{len(rows) - 1}\t{r.elapsed:.2f}\t{r.k:.4f}\t{r.theta:.4f}\t"
                  f"{r.mode:.2f}\t{r.mean:.2f}\t{r.q80:.2f}", flush=True)
    if run.out is not None:
        with open(run.path("predictions.tsv"), "w", encoding="utf-8") as fh:
            fh.write(_format_rows(rows) + "\n")


# ----------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------

COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-initial": cmd_train_initial,
    "train-realtime": cmd_train_realtime,
    "search": cmd_search,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "attention": cmd_attention,
    "bigrams": cmd_bigrams,
    "report": cmd_report,
}


def _common(p, data=True, checkpoint=False, train=False):
    p.add_argument("--config", metavar="PATH", help="key = value config file (CLI flags override it)")
    p.add_argument("--seed", type=int, help="RNG seed (integer)")
    p.add_argument("--out", metavar="DIR", help="output directory for artifacts and the run manifest")
    p.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    if data:
        p.add_argument("--data-dir", metavar="DIR",
                       help="directory with outages.jsonl, logs.jsonl and weather.jsonl")
        p.add_argument("--split-spec", metavar="PATH",
                       help="key = value file with train_end and validation_end timestamps "
                            "(default 2014-03-15 / 2015-03-15)")
    if checkpoint:
        p.add_argument("--checkpoint", metavar="DIR",
                       help=f"directory holding {bundle.INITIAL_FILE} and {bundle.REALTIME_FILE}")
    if train:
        p.add_argument("--max-epochs", type=int, help="maximum training epochs (count)")
        p.add_argument("--patience", type=int, help="early-stopping patience (epochs)")
        p.add_argument("--lr", type=float, help="Adam learning rate (default 0.001)")
        p.add_argument("--dropout", type=float, help="variational dropout rate in [0, 1)")
        p.add_argument("--target", choices=("remaining", "total"),
                       help="real-time target: hours remaining or total duration in hours")
        p.add_argument("--heads", type=int, choices=(1, 2), help="attention heads (1 or 2)")


def build_parser():
    parser = _Parser(prog="outagecast", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a seeded synthetic corpus")
    _common(p, data=False)
    p.add_argument("--n-outages", type=int, help="number of outages to simulate (count)")

    p = sub.add_parser("train-initial", help="fit the onset-only Gamma predictor")
    _common(p, train=True)
    p.add_argument("--include-cause", action="store_true",
                   help="add the oracle cause one-hot to the onset features")
    p.add_argument("--features", choices=sorted(ft.FEATURE_GROUPS),
                   help="feature group for the initial model (default onset)")

    p = sub.add_parser("train-realtime", help="fit the log-driven real-time model")
    _common(p, train=True)

    p = sub.add_parser("search", help="random hyperparameter search for the real-time model")
    _common(p, train=True)
    p.add_argument("--trials", type=int, default=4, help="number of sampled configs (count, default 4)")

    p = sub.add_parser("predict", help="predict for one outage as logs arrive on stdin")
    _common(p, checkpoint=True)
    p.add_argument("--outage", metavar="JSON",
                   help="outage JSON (or a path to one) with start, feeder, line_type, customers")
    p.add_argument("--logs", default="-", metavar="PATH",
                   help="'<elapsed hours>\\t<text>' lines; '-' reads stdin (default)")

    p = sub.add_parser("evaluate", help="test-split metrics, per-report curve and baseline")
    _common(p, checkpoint=True)
    p.add_argument("--feature-table", action="store_true",
                   help="also train one initial model per feature group (NLL in nats, RMSE in hours)")

    p = sub.add_parser("attention", help="export per-token attention weights")
    _common(p, checkpoint=True)
    p.add_argument("--split", choices=("train", "validation", "test"), default="test",
                   help="which date split to export (default test)")

    p = sub.add_parser("bigrams", help="count bigrams around the most-attended token")
    _common(p, data=False)
    p.add_argument("--attention", metavar="PATH", help="attention.jsonl written by 'attention'")
    p.add_argument("--top", type=int, default=20, help="rows to keep per head (count, default 20)")

    p = sub.add_parser("report", help="mode/mean/80%% rows for one outage in the corpus")
    _common(p, checkpoint=True)
    p.add_argument("--outage-id", required=True, help="outage id as stored in outages.jsonl")
    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:       # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    args.argv = argv
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    run = Run(args)
    try:
        COMMANDS[args.command](args, run)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (nc.NonFiniteError, GammaParamError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        run.manifest(f"numerical failure: {exc}")
        return EXIT_NUMERIC
    except (ds.DataError, tp.VocabError, bundle.BundleError, GenConfigError, TrainingError,
            OSError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        run.manifest(f"data error: {exc}")
        return EXIT_DATA
    run.manifest("ok")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

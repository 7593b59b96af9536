"""Saving and loading trained models together with their preprocessing state."""

from __future__ import annotations

from pathlib import Path

from . import features as ft
from . import numcore as nc
from . import textprep as tp
from .netmodel import InitialConfig, InitialPredictor, RealtimeConfig, RealtimeModel

INITIAL_FILE = "initial.npz"
REALTIME_FILE = "realtime.npz"


class BundleError(ValueError):
    pass


def _load(path, kind):
    path = Path(path)
    if not path.exists():
        raise BundleError(f"no {kind} checkpoint at {path}; run the matching train command first")
    try:
        arrays, header = nc.load_checkpoint(path)
    except (OSError, ValueError, nc.NumcoreError) as exc:
        raise BundleError(f"{path}: cannot read checkpoint ({exc})") from None
    if header["meta"].get("kind") != kind:
        raise BundleError(f"{path}: expected a {kind} checkpoint")
    return arrays, header


def _restore(params, arrays, path):
    try:
        params.restore(arrays)
    except (KeyError, nc.ShapeError) as exc:
        raise BundleError(f"{path}: parameters do not match the stored config ({exc})") from None


def save_initial(path, model, group, std, feeder_stats, train_config):
    meta = {"kind": "initial", "group": group, "std": std.to_dict(),
            "feeder_stats": feeder_stats.to_dict(), "train_config": train_config.to_dict()}
    nc.save_checkpoint(path, model.params, model.config.to_dict(), meta)


def load_initial(path):
    """Return ``(model, meta)``."""
    arrays, header = _load(path, "initial")
    model = InitialPredictor(InitialConfig(**header["config"]), seed=header["seed"])
    _restore(model.params, arrays, path)
    return model, header["meta"]


def save_realtime(path, model, vocab, std, feeder_stats, train_config):
    meta = {"kind": "realtime", "vocab": {"tokens": list(vocab.tokens), "counts": list(vocab.counts),
                                         "cutoff": vocab.cutoff},
            "std": std.to_dict(), "feeder_stats": feeder_stats.to_dict(),
            "train_config": train_config.to_dict()}
    nc.save_checkpoint(path, model.params, model.cfg.to_dict(), meta)


def load_realtime(path):
    """Return ``(model, vocab, meta)``."""
    arrays, header = _load(path, "realtime")
    model = RealtimeModel(RealtimeConfig(**header["config"]), seed=header["seed"])
    _restore(model.params, arrays, path)
    v = header["meta"]["vocab"]
    vocab = tp.Vocab.from_tokens(v["tokens"], v["counts"], v["cutoff"])
    return model, vocab, header["meta"]


def preprocessing(meta):
    """Standardization and feeder statistics stored with a model."""
    return ft.StandardizationStats.from_dict(meta["std"]), ft.FeederStats.from_dict(meta["feeder_stats"])

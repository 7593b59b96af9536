"""Adam with batch size one, early stopping, variational dropout, random search."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import numcore as nc
from .gammadist import MIN_DURATION_H, nll_array
from .netmodel import InitialConfig, InitialPredictor, RealtimeConfig, RealtimeModel

logger = logging.getLogger(__name__)

TARGETS = ("remaining", "total")


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    max_epochs: int = 30
    patience: int = 5
    dropout: float = 0.0
    vocab_cutoff: int = 2
    hidden1: int = 32
    hidden2: int = 32
    embed: int = 32
    cell: int = 32
    state: int = 64
    layer_norm: bool = True
    heads: int = 2
    recurrent: bool = True
    seed: int = 0
    clip: float = 5.0          # gradient-norm clip; 0 disables
    target: str = "remaining"

    def __post_init__(self):
        if not self.lr > 0:
            raise TrainingError("learning rate must be > 0")
        if self.patience < 1:
            raise TrainingError("patience must be >= 1")
        if self.max_epochs < 1:
            raise TrainingError("max_epochs must be >= 1")
        if self.heads not in (1, 2):
            raise TrainingError("heads must be 1 or 2")
        if not 0.0 <= self.dropout < 1.0:
            raise TrainingError("dropout must be in [0, 1)")
        if self.clip < 0:
            raise TrainingError("clip must be >= 0")
        if self.target not in TARGETS:
            raise TrainingError(f"target must be one of {TARGETS}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def initial_config(self, n_features):
        return InitialConfig(n_features, self.hidden1, self.hidden2)

    def realtime_config(self, n_features, vocab_size):
        return RealtimeConfig(n_features, vocab_size, self.embed, self.cell, self.state,
                              self.heads, self.layer_norm, self.recurrent)


# ----------------------------------------------------------------------
# optimizer
# ----------------------------------------------------------------------


@dataclass
class AdamState:
    """Flat first/second moments in the parameter order of the ParamSet."""

    m: np.ndarray
    v: np.ndarray
    layout: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: int = 0

    @classmethod
    def for_params(cls, params, **kw):
        layout, offset = [], 0
        for name, p in params.items():
            layout.append((name, offset, p.data.size, p.data.shape))
            offset += p.data.size
        return cls(np.zeros(offset), np.zeros(offset), layout, **kw)

    def moments(self, name):
        """``(m, v)`` for one parameter, shaped like it."""
        for n, off, size, shape in self.layout:
            if n == name:
                return self.m[off:off + size].reshape(shape), self.v[off:off + size].reshape(shape)
        raise KeyError(name)


def adam_step(params, state, lr, clip=0.0):
    """One bias-corrected Adam update from the current grads, then zero them.

    A non-finite gradient skips the update (counted in ``state.skipped``).
    With ``clip > 0`` the global gradient norm is capped at ``clip``.
    Returns True when an update was applied.
    """
    items = list(params.items())
    if len(items) != len(state.layout) or any(
            n != lay[0] for (n, _), lay in zip(items, state.layout)):
        raise TrainingError("Adam state does not match the parameter set")
    g = np.concatenate([np.zeros(p.data.size) if p.grad is None else p.grad.ravel()
                        for _, p in items])
    sq = float(np.dot(g, g))
    # a non-finite entry anywhere makes the squared norm non-finite
    if not math.isfinite(sq):
        state.skipped += 1
        logger.warning("non-finite gradient; update skipped (%d so far)", state.skipped)
        params.clear_grad()
        return False
    if clip and clip > 0 and sq > clip * clip:
        g = g * (clip / math.sqrt(sq))
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m = b1 * state.m + (1.0 - b1) * g
    state.v = b2 * state.v + (1.0 - b2) * (g * g)
    step = (lr / (1.0 - b1 ** state.t)) * state.m / (np.sqrt(state.v / (1.0 - b2 ** state.t)) + state.eps)
    for (_, p), (_, off, size, shape) in zip(items, state.layout):
        p.data = p.data - step[off:off + size].reshape(shape)
    params.clear_grad()
    return True


# ----------------------------------------------------------------------
# variational dropout
# ----------------------------------------------------------------------


def variational_dropout_masks(shapes, rate, rng):
    """One inverted-dropout mask per named connection.

    ``shapes`` maps names to shapes.  Each mask is Bernoulli(1-rate)/(1-rate)
    and is meant to be reused at every time step of a sequence.
    """
    if not 0.0 <= rate < 1.0:
        raise TrainingError(f"dropout rate must be in [0, 1), got {rate}")
    out = {}
    for name, shape in shapes.items():
        if rate == 0.0:
            out[name] = np.ones(shape)
        else:
            keep = rng.random(shape) >= rate
            out[name] = keep / (1.0 - rate)
    return out


def encoder_mask_shapes(cfg: RealtimeConfig):
    if not cfg.recurrent:
        return {}
    return {"enc.fwd.x": cfg.embed, "enc.fwd.h": cfg.cell,
            "enc.bwd.x": cfg.embed, "enc.bwd.h": cfg.cell}


def update_mask_shapes(cfg: RealtimeConfig):
    return {"upd.x": cfg.n_features + cfg.summary_width + 1, "upd.h": cfg.state}


# ----------------------------------------------------------------------
# data containers
# ----------------------------------------------------------------------


@dataclass
class OutageExample:
    """One outage ready for the real-time model.

    ``logs`` is a time-ordered list of ``(token ids, elapsed hours)``.
    """

    id: str
    features: np.ndarray
    duration_h: float
    logs: list = field(default_factory=list)

    def targets(self, target="remaining"):
        if target == "total":
            return [self.duration_h] * len(self.logs)
        return [max(self.duration_h - t, MIN_DURATION_H) for _, t in self.logs]


@dataclass
class EpochRecord:
    epoch: int
    train_nll: float
    validation_nll: float


@dataclass
class TrainResult:
    model: object
    history: list
    best_epoch: int
    best_validation_nll: float
    skipped_steps: int = 0


def write_history(path, history):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_nll", "validation_nll"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_nll), repr(r.validation_nll)])


# ----------------------------------------------------------------------
# training loops
# ----------------------------------------------------------------------


def _rngs(seed):
    init_ss, order_ss, drop_ss = np.random.SeedSequence(seed).spawn(3)
    return (int(init_ss.generate_state(1)[0]), np.random.default_rng(order_ss),
            np.random.default_rng(drop_ss))


def _early_stopping_loop(params, config, n_train, step_fn, validate_fn, label):
    """Shared epoch loop; returns (history, best_epoch, best_val, skipped)."""
    _, order_rng, _ = _rngs(config.seed)
    state = AdamState.for_params(params)
    best_val, best_epoch, best_snap = math.inf, 0, params.snapshot()
    history = []
    since_best = 0
    for epoch in range(1, config.max_epochs + 1):
        total = 0.0
        for i in order_rng.permutation(n_train):
            loss = step_fn(int(i))
            nc.backward(loss)
            adam_step(params, state, config.lr, config.clip)
            total += loss.item()
        train_nll = total / n_train
        val = validate_fn()
        history.append(EpochRecord(epoch, train_nll, val))
        logger.info("%s epoch %d: train %.4f validation %.4f", label, epoch, train_nll, val)
        if val < best_val:
            best_val, best_epoch, best_snap = val, epoch, params.snapshot()
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    params.restore(best_snap)
    return history, best_epoch, best_val, state.skipped


def _as_xy(split, name):
    X, d = split
    X = np.asarray(X, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(d):
        raise TrainingError(f"{name} split: features and durations disagree in length")
    if len(d) == 0:
        raise TrainingError(f"{name} split is empty")
    return X, d


def initial_nll(model, X, d):
    """Mean NLL of the initial predictor over rows of ``X``."""
    k, theta = model.predict_batch(X)
    return float(nll_array(d, k, theta).mean())


def train_initial(train, validation, config: TrainConfig):
    """Fit an :class:`InitialPredictor` on ``(X, durations)`` pairs."""
    X, d = _as_xy(train, "train")
    Xv, dv = _as_xy(validation, "validation")
    init_seed, _, _ = _rngs(config.seed)
    model = InitialPredictor(config.initial_config(X.shape[1]), seed=init_seed)

    def step(i):
        return model.loss(X[i], d[i])

    def validate():
        return initial_nll(model, Xv, dv)

    hist, best_epoch, best_val, skipped = _early_stopping_loop(
        model.params, config, len(d), step, validate, "initial")
    return TrainResult(model, hist, best_epoch, best_val, skipped)


def realtime_nll(model, examples, target="remaining"):
    """Mean per-report NLL of the real-time model."""
    total, n = 0.0, 0
    for ex in examples:
        preds, _ = model.predict(ex.features, ex.logs)
        tg = ex.targets(target)
        k = np.array([p.k for p in preds])
        th = np.array([p.theta for p in preds])
        total += float(nll_array(np.asarray(tg), k, th).sum())
        n += len(tg)
    return total / max(n, 1)


def _check_examples(examples, name):
    if not examples:
        raise TrainingError(f"{name} split is empty")
    for ex in examples:
        if not ex.logs:
            raise TrainingError(f"outage {ex.id} in {name} split has no repair logs")


def train_realtime(train, validation, config: TrainConfig, vocab_size):
    """Fit a :class:`RealtimeModel` on lists of :class:`OutageExample`."""
    _check_examples(train, "train")
    _check_examples(validation, "validation")
    n_features = len(train[0].features)
    init_seed, _, drop_rng = _rngs(config.seed)
    cfg = config.realtime_config(n_features, vocab_size)
    model = RealtimeModel(cfg, seed=init_seed)
    enc_shapes, upd_shapes = encoder_mask_shapes(cfg), update_mask_shapes(cfg)

    def step(i):
        ex = train[i]
        masks = log_masks = None
        if config.dropout > 0:
            masks = variational_dropout_masks(upd_shapes, config.dropout, drop_rng)
            log_masks = [variational_dropout_masks(enc_shapes, config.dropout, drop_rng)
                         for _ in ex.logs]
        loss, _ = model.loss(ex.features, ex.logs, ex.targets(config.target), masks, log_masks)
        return loss

    def validate():
        return realtime_nll(model, validation, config.target)

    hist, best_epoch, best_val, skipped = _early_stopping_loop(
        model.params, config, len(train), step, validate, "realtime")
    return TrainResult(model, hist, best_epoch, best_val, skipped)


# ----------------------------------------------------------------------
# random search
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class SearchSpace:
    """Choices per hyperparameter; each trial draws every field uniformly."""

    lr: tuple = (0.001,)
    vocab_cutoff: tuple = (1, 2, 5)
    embed: tuple = (16, 32)
    state: tuple = (32, 64)
    cell: tuple = (16, 32)
    dropout: tuple = (0.0, 0.1, 0.25)
    max_epochs: tuple = (10, 20, 30)
    heads: tuple = (1, 2)
    layer_norm: tuple = (True, False)

    def __post_init__(self):
        for f in fields(self):
            if len(getattr(self, f.name)) == 0:
                raise TrainingError(f"search space field {f.name!r} is empty")

    def sample(self, rng, base: TrainConfig):
        picks = {}
        for f in fields(self):
            choices = getattr(self, f.name)
            picks[f.name] = choices[int(rng.integers(len(choices)))]
        return replace(base, **picks)


@dataclass
class Trial:
    index: int
    config: TrainConfig
    validation_nll: float


def random_search(space, budget, rng, train_fn, base=None):
    """Train ``budget`` sampled configs; ``train_fn(config)`` returns validation NLL.

    Returns ``(best config, leaderboard)`` with the leaderboard sorted by
    validation NLL ascending; non-finite scores rank last.
    """
    if budget < 1:
        raise TrainingError("search budget must be >= 1")
    base = base or TrainConfig()
    trials = []
    for i in range(budget):
        cfg = space.sample(rng, base)
        cfg = replace(cfg, seed=int(rng.integers(2**31)))
        try:
            score = float(train_fn(cfg))
        except (nc.NonFiniteError, FloatingPointError) as exc:
            logger.warning("trial %d failed: %s", i, exc)
            score = math.inf
        if not math.isfinite(score):
            score = math.inf
        logger.info("trial %d: validation NLL %.4f", i, score)
        trials.append(Trial(i, cfg, score))
    board = sorted(trials, key=lambda t: (t.validation_nll, t.index))
    return board[0].config, board


def write_leaderboard(path, board):
    names = [f.name for f in fields(TrainConfig)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "trial"] + names + ["validation_nll"])
        for rank, t in enumerate(board, 1):
            cfg = t.config.to_dict()
            w.writerow([rank, t.index] + [cfg[n] for n in names] + [repr(t.validation_nll)])

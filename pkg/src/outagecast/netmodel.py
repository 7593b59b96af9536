"""Networks: onset-feature predictor, repair-log encoder, real-time updater.

Shapes follow row-vector convention: a feature vector ``f`` of width F is
mapped by ``f @ W`` with ``W`` of shape ``(F, H)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import numcore as nc
from .gammadist import GammaParams, nll_node, nll_parts


class ModelError(ValueError):
    pass


# ----------------------------------------------------------------------
# initial predictor
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class InitialConfig:
    n_features: int
    hidden1: int = 32
    hidden2: int = 32

    def to_dict(self):
        return asdict(self)


class InitialPredictor:
    """Two ReLU layers feeding softplus heads for shape and scale."""

    def __init__(self, config: InitialConfig, seed=0, params=None):
        self.config = config
        p = params if params is not None else nc.ParamSet(seed)
        F, h1, h2 = config.n_features, config.hidden1, config.hidden2
        self.params = p
        self.W1 = p.glorot("init.W1", F, h1)
        self.b1 = p.zeros("init.b1", (h1,))
        self.W2 = p.glorot("init.W2", h1, h2)
        self.b2 = p.zeros("init.b2", (h2,))
        self.w_k = p.add("init.w_k", _glorot_vec(p.rng, h2))
        self.b_k = p.zeros("init.b_k", ())
        self.w_theta = p.add("init.w_theta", _glorot_vec(p.rng, h2))
        self.b_theta = p.zeros("init.b_theta", ())

    def forward(self, f):
        f = nc.constant(f)
        if f.data.shape != (self.config.n_features,):
            raise nc.ShapeError("initial_forward", f.data.shape, (self.config.n_features,))
        g1 = nc.relu(f @ self.W1 + self.b1)
        g2 = nc.relu(g1 @ self.W2 + self.b2)
        k = nc.softplus(g2 @ self.w_k + self.b_k)
        theta = nc.softplus(g2 @ self.w_theta + self.b_theta)
        return k, theta

    def predict(self, f):
        with nc.no_grad():
            k, theta = self.forward(f)
        return GammaParams(k.item(), theta.item())

    def predict_batch(self, X):
        """Vectorized inference, returns ``(k, theta)`` arrays."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        if X.shape[1] != self.config.n_features:
            raise nc.ShapeError("initial_predict_batch", X.shape, (None, self.config.n_features))
        g1 = np.maximum(X @ self.W1.data + self.b1.data, 0.0)
        g2 = np.maximum(g1 @ self.W2.data + self.b2.data, 0.0)
        a = g2 @ self.w_k.data + self.b_k.data
        b = g2 @ self.w_theta.data + self.b_theta.data
        return _softplus_np(a), _softplus_np(b)

    def loss(self, f, d):
        """NLL of duration ``d`` as one fused graph node.

        Same value and gradients as :meth:`loss_composed`; the hand-written
        backward avoids building a dozen tiny nodes per training step.
        """
        x = np.asarray(f, dtype=np.float64)
        if x.shape != (self.config.n_features,):
            raise nc.ShapeError("initial_forward", x.shape, (self.config.n_features,))
        nc._check_finite("initial_loss", x)
        W1, W2, wk, wt = self.W1.data, self.W2.data, self.w_k.data, self.w_theta.data
        a1 = x @ W1 + self.b1.data
        h1 = np.maximum(a1, 0.0)
        a2 = h1 @ W2 + self.b2.data
        h2 = np.maximum(a2, 0.0)
        zk = float(h2 @ wk + self.b_k.data)
        zt = float(h2 @ wt + self.b_theta.data)
        k, theta = float(_softplus_np(zk)), float(_softplus_np(zt))
        val, dk, dt = nll_parts(d, k, theta)

        def bw(g):
            gk = g * dk * float(nc._sigmoid_np(zk))
            gt = g * dt * float(nc._sigmoid_np(zt))
            ga2 = (gk * wk + gt * wt) * (a2 > 0)
            ga1 = (W2 @ ga2) * (a1 > 0)
            return (np.outer(x, ga1), ga1, np.outer(h1, ga2), ga2,
                    gk * h2, np.array(gk), gt * h2, np.array(gt))

        parents = (self.W1, self.b1, self.W2, self.b2, self.w_k, self.b_k, self.w_theta, self.b_theta)
        return nc.make_node(np.array(val), parents, bw, "initial_nll")

    def loss_composed(self, f, d):
        """Reference loss built from graph primitives."""
        k, theta = self.forward(f)
        return nll_node(d, k, theta)


def _glorot_vec(rng, n):
    limit = math.sqrt(6.0 / (n + 1))
    return rng.uniform(-limit, limit, size=n)


def _softplus_np(x):
    return np.maximum(np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))), nc._TINY)


# ----------------------------------------------------------------------
# GRU with optional layer normalization
# ----------------------------------------------------------------------


class GRUCell:
    """GRU cell; with ``layer_norm`` each gate's pre-activation is normalized.

    z = sigmoid(LN(x Wz + h Uz) + bz)
    r = sigmoid(LN(x Wr + h Ur) + br)
    c = tanh(LN(x Wh + r * (h Uh)) + bh)
    h' = (1 - z) * h + z * c

    The bias of each gate doubles as the layer-norm bias.
    """

    def __init__(self, params, prefix, n_in, n_hidden, layer_norm=True):
        self.n_in, self.n_hidden, self.layer_norm = n_in, n_hidden, layer_norm
        h = n_hidden
        self.W_zr = params.glorot(f"{prefix}.W_zr", n_in, 2 * h)
        self.W_h = params.glorot(f"{prefix}.W_h", n_in, h)
        self.U_zr = params.glorot(f"{prefix}.U_zr", h, 2 * h)
        self.U_h = params.glorot(f"{prefix}.U_h", h, h)
        self.b_zr = params.zeros(f"{prefix}.b_zr", (2, h))
        self.b_h = params.zeros(f"{prefix}.b_h", (h,))
        if layer_norm:
            self.g_zr = params.ones(f"{prefix}.g_zr", (2, h))
            self.g_h = params.ones(f"{prefix}.g_h", (h,))

    def project_inputs(self, X, mask=None):
        """Input projections for a whole sequence ``X`` of shape (n, n_in)."""
        if mask is not None:
            X = X * mask
        return X @ self.W_zr, X @ self.W_h

    def step_projected(self, xzr, xh, h_prev, mask_h=None):
        h = self.n_hidden
        hm = h_prev * mask_h if mask_h is not None else h_prev
        zr_pre = nc.reshape(xzr + hm @ self.U_zr, (2, h))
        if self.layer_norm:
            zr = nc.sigmoid(nc.layer_norm(zr_pre, self.g_zr, self.b_zr))
        else:
            zr = nc.sigmoid(zr_pre + self.b_zr)
        z, r = zr[0], zr[1]
        cand_pre = xh + r * (hm @ self.U_h)
        if self.layer_norm:
            cand = nc.tanh(nc.layer_norm(cand_pre, self.g_h, self.b_h))
        else:
            cand = nc.tanh(cand_pre + self.b_h)
        return h_prev + z * (cand - h_prev)

    def __call__(self, x, h_prev, mask_x=None, mask_h=None):
        x, h_prev = nc.constant(x), nc.constant(h_prev)
        if x.data.shape != (self.n_in,):
            raise nc.ShapeError("gru_cell", x.data.shape, (self.n_in,))
        if h_prev.data.shape != (self.n_hidden,):
            raise nc.ShapeError("gru_cell", h_prev.data.shape, (self.n_hidden,))
        if mask_x is not None:
            x = x * mask_x
        return self.step_projected(x @ self.W_zr, x @ self.W_h, h_prev, mask_h)

    def step(self, x, h_prev, mask_x=None, mask_h=None):
        """One step through the fused kernel (same math as ``__call__``)."""
        X = nc.reshape(nc.constant(x), (1, self.n_in))
        return gru_sequence(self, X, h_prev, False, mask_x, mask_h)[0]

    def run_composed(self, X, h0, reverse=False, mask_x=None, mask_h=None):
        """Run over the rows of ``X`` step by step from graph primitives.

        Returns the list of hidden states in input order.  Slow; kept as the
        reference for :meth:`run`.
        """
        n = X.data.shape[0]
        XZ, XH = self.project_inputs(X, mask_x)
        order = range(n - 1, -1, -1) if reverse else range(n)
        h = h0
        states = [None] * n
        for t in order:
            h = self.step_projected(XZ[t], XH[t], h, mask_h)
            states[t] = h
        return states

    def run(self, X, h0, reverse=False, mask_x=None, mask_h=None):
        """Whole-sequence GRU as one graph node; returns states (n, hidden)."""
        return gru_sequence(self, X, h0, reverse, mask_x, mask_h)

    def run_many(self, Xs, h0, reverse=False, masks_x=None, masks_h=None):
        """Run several sequences in lockstep; returns one state matrix each."""
        out = gru_batch(self, Xs, h0, reverse, masks_x, masks_h)
        return [out[i, :nc.constant(x).data.shape[0]] for i, x in enumerate(Xs)]

    def weights(self):
        w = [self.W_zr, self.W_h, self.U_zr, self.U_h, self.b_zr, self.b_h]
        if self.layer_norm:
            w += [self.g_zr, self.g_h]
        return w


def _ln_forward(a, eps=nc.LN_EPS):
    w = 1.0 / a.shape[-1]
    ac = a - a.sum(axis=-1, keepdims=True) * w
    inv = 1.0 / np.sqrt((ac * ac).sum(axis=-1, keepdims=True) * w + eps)
    return ac * inv, inv


def _ln_backward(dxhat, xhat, inv):
    w = 1.0 / dxhat.shape[-1]
    return inv * (dxhat - dxhat.sum(axis=-1, keepdims=True) * w
                  - xhat * ((dxhat * xhat).sum(axis=-1, keepdims=True) * w))


def gru_sequence(cell, X, h0, reverse=False, mask_x=None, mask_h=None):
    """Whole-sequence GRU as one graph node; returns states (n, hidden)."""
    out = gru_batch(cell, [X], h0, reverse,
                    None if mask_x is None else [mask_x],
                    None if mask_h is None else [mask_h])
    return out[0]


def gru_batch(cell, Xs, h0, reverse=False, masks_x=None, masks_h=None):
    """Run ``cell`` over several independent sequences in lockstep.

    Computes exactly what :meth:`GRUCell.run_composed` computes for each
    sequence, with one graph node and a hand-written backward pass through
    time.  Returns a Value of shape (B, max_len, hidden); row ``b`` holds
    the states of ``Xs[b]`` in input order, zero-padded past its length.
    ``h0`` is (hidden,) shared or (B, hidden); per-sequence dropout masks
    are lists (or None).
    """
    Xs = [nc.constant(x) for x in Xs]
    h0 = nc.constant(h0)
    nb, hsz, nin = len(Xs), cell.n_hidden, cell.n_in
    if nb == 0:
        raise ModelError("gru_batch needs at least one sequence")
    for x in Xs:
        if x.data.ndim != 2 or x.data.shape[1] != nin or x.data.shape[0] == 0:
            raise nc.ShapeError("gru_batch", x.data.shape, (None, nin))
    if h0.data.shape not in ((hsz,), (nb, hsz)):
        raise nc.ShapeError("gru_batch", h0.data.shape, (hsz,))
    lens = np.array([x.data.shape[0] for x in Xs])
    T = int(lens.max())
    ln = cell.layer_norm
    W_zr, W_h, U_zr, U_h = cell.W_zr.data, cell.W_h.data, cell.U_zr.data, cell.U_h.data
    b_zr, b_h = cell.b_zr.data, cell.b_h.data
    g_zr = cell.g_zr.data if ln else None
    g_h = cell.g_h.data if ln else None
    MX = np.ones((nb, nin)) if masks_x is None else np.stack(
        [np.ones(nin) if m is None else np.asarray(m, dtype=np.float64) for m in masks_x])
    MH = np.ones((nb, hsz)) if masks_h is None else np.stack(
        [np.ones(hsz) if m is None else np.asarray(m, dtype=np.float64) for m in masks_h])

    # pos[b, s]: input position handled by sequence b at step s
    steps = np.arange(T)
    pos = np.where(steps < lens[:, None],
                   (lens[:, None] - 1 - steps) if reverse else steps, 0)
    Xp = np.zeros((nb, T, nin))
    for i, x in enumerate(Xs):
        Xp[i, :lens[i]] = x.data[pos[i, :lens[i]]]
    Xm = Xp * MX[:, None, :]
    XZ = Xm @ W_zr
    XH = Xm @ W_h

    H = np.empty((T, nb, hsz))
    HP = np.empty((T, nb, hsz))
    Z = np.empty((T, nb, hsz))
    R = np.empty((T, nb, hsz))
    C = np.empty((T, nb, hsz))
    Uc = np.empty((T, nb, hsz))
    XHAT_zr = np.empty((T, nb, 2, hsz))
    INV_zr = np.empty((T, nb, 2, 1))
    XHAT_c = np.empty((T, nb, hsz))
    INV_c = np.empty((T, nb, 1))
    h = np.broadcast_to(h0.data, (nb, hsz)).copy()
    for t in range(T):
        HP[t] = h
        hm = h * MH
        a_zr = (XZ[:, t] + hm @ U_zr).reshape(nb, 2, hsz)
        if ln:
            xh_, inv_ = _ln_forward(a_zr)
            XHAT_zr[t], INV_zr[t] = xh_, inv_
            pre = g_zr * xh_ + b_zr
        else:
            pre = a_zr + b_zr
        zr = 0.5 * (1.0 + np.tanh(0.5 * pre))
        z, r = zr[:, 0], zr[:, 1]
        u = hm @ U_h
        a_c = XH[:, t] + r * u
        if ln:
            xc_, invc_ = _ln_forward(a_c)
            XHAT_c[t], INV_c[t] = xc_, invc_
            pre_c = g_h * xc_ + b_h
        else:
            pre_c = a_c + b_h
        c = np.tanh(pre_c)
        h = h + z * (c - h)
        H[t], Z[t], R[t], C[t], Uc[t] = h, z, r, c, u
    if not np.isfinite(H).all():
        raise nc.NonFiniteError("gru_batch: non-finite state")

    rows = [np.full(int(L), i) for i, L in enumerate(lens)]
    rows = np.concatenate(rows)
    cols_step = np.concatenate([np.arange(L) for L in lens])
    cols_pos = pos[rows, cols_step]
    out = np.zeros((nb, T, hsz))
    out[rows, cols_pos] = H[cols_step, rows]

    def bw(G):
        Gs = np.zeros((T, nb, hsz))
        Gs[cols_step, rows] = G[rows, cols_pos]
        DA_zr = np.zeros((T, nb, 2 * hsz))
        DA_c = np.zeros((T, nb, hsz))
        DU = np.zeros((T, nb, hsz))
        dg_zr = np.zeros((2, hsz)) if ln else None
        dg_h = np.zeros(hsz) if ln else None
        db_zr = np.zeros((2, hsz))
        db_h = np.zeros(hsz)
        carry = np.zeros((nb, hsz))
        for t in range(T - 1, -1, -1):
            dh = Gs[t] + carry
            z, r, c, hp, u = Z[t], R[t], C[t], HP[t], Uc[t]
            dz = dh * (c - hp)
            dpre_c = dh * z * (1.0 - c * c)
            db_h += dpre_c.sum(axis=0)
            if ln:
                dg_h += (dpre_c * XHAT_c[t]).sum(axis=0)
                da_c = _ln_backward(dpre_c * g_h, XHAT_c[t], INV_c[t])
            else:
                da_c = dpre_c
            dr = da_c * u
            du = da_c * r
            dpre_zr = np.stack([dz * z * (1.0 - z), dr * r * (1.0 - r)], axis=1)
            db_zr += dpre_zr.sum(axis=0)
            if ln:
                dg_zr += (dpre_zr * XHAT_zr[t]).sum(axis=0)
                da_zr = _ln_backward(dpre_zr * g_zr, XHAT_zr[t], INV_zr[t])
            else:
                da_zr = dpre_zr
            da_flat = da_zr.reshape(nb, 2 * hsz)
            dhm = du @ U_h.T + da_flat @ U_zr.T
            carry = dh * (1.0 - z) + dhm * MH
            DA_zr[t], DA_c[t], DU[t] = da_flat, da_c, du
        # padded steps carry zero gradient, so plain sums are exact
        HM = (HP * MH).reshape(-1, hsz)
        Xm_t = Xm.transpose(1, 0, 2).reshape(-1, nin)
        DA_zr2 = DA_zr.reshape(-1, 2 * hsz)
        DA_c2 = DA_c.reshape(-1, hsz)
        dXp = ((DA_zr @ W_zr.T + DA_c @ W_h.T) * MX).transpose(1, 0, 2)
        dXs = []
        for i in range(nb):
            dx = np.zeros((int(lens[i]), nin))
            dx[pos[i, :lens[i]]] = dXp[i, :lens[i]]
            dXs.append(dx)
        dh0 = carry if h0.data.ndim == 2 else carry.sum(axis=0)
        grads = dXs + [dh0, Xm_t.T @ DA_zr2, Xm_t.T @ DA_c2, HM.T @ DA_zr2,
                       HM.T @ DU.reshape(-1, hsz), db_zr, db_h]
        if ln:
            grads += [dg_zr, dg_h]
        return tuple(grads)

    parents = tuple(Xs) + (h0,) + tuple(cell.weights())
    return nc.make_node(out, parents, bw, "gru_batch")


# ----------------------------------------------------------------------
# real-time model
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class RealtimeConfig:
    n_features: int
    vocab_size: int
    embed: int = 32
    cell: int = 32
    state: int = 64
    heads: int = 2
    layer_norm: bool = True
    recurrent: bool = True

    def __post_init__(self):
        if self.heads not in (1, 2):
            raise ModelError("heads must be 1 or 2")

    @property
    def token_width(self):
        return 2 * self.cell if self.recurrent else self.embed

    @property
    def summary_width(self):
        return self.token_width * self.heads

    def to_dict(self):
        return asdict(self)


class LogEncoder:
    """Embedding, bi-directional GRU and multi-head attention over one log."""

    def __init__(self, params, cfg: RealtimeConfig):
        self.cfg = cfg
        self.E = params.uniform("enc.E", (cfg.vocab_size, cfg.embed), 0.05)
        if cfg.recurrent:
            self.fwd = GRUCell(params, "enc.fwd", cfg.embed, cfg.cell, cfg.layer_norm)
            self.bwd = GRUCell(params, "enc.bwd", cfg.embed, cfg.cell, cfg.layer_norm)
        w = cfg.token_width
        self.heads = []
        for i in range(cfg.heads):
            self.heads.append((
                params.glorot(f"enc.att{i}.M1", cfg.state, w),
                params.zeros(f"enc.att{i}.b1", (w,)),
                params.glorot(f"enc.att{i}.M2", w, w),
                params.zeros(f"enc.att{i}.b2", (w,)),
            ))

    def token_states(self, ids, masks=None):
        return self.token_states_many([ids], [masks])[0]

    def token_states_many(self, ids_list, masks_list=None):
        """Token states for several logs; the GRUs run them in lockstep."""
        if masks_list is None:
            masks_list = [None] * len(ids_list)
        masks_list = [m or {} for m in masks_list]
        Xs = []
        for ids in ids_list:
            ids = np.asarray(ids, dtype=np.int64)
            if ids.size == 0:
                raise ModelError("cannot encode an empty token sequence")
            Xs.append(nc.take_rows(self.E, ids))
        if not self.cfg.recurrent:
            return Xs
        h0 = nc.constant(np.zeros(self.cfg.cell))

        def pick(key):
            return [m.get(key) for m in masks_list]

        hf = self.fwd.run_many(Xs, h0, False, pick("enc.fwd.x"), pick("enc.fwd.h"))
        hb = self.bwd.run_many(Xs, h0, True, pick("enc.bwd.x"), pick("enc.bwd.h"))
        return [nc.concat([a, b], axis=1) for a, b in zip(hf, hb)]

    def attend(self, H, o_prev):
        """Return ``(s_t, [alpha per head])`` for token states ``H``."""
        outs, alphas = [], []
        for M1, b1, M2, b2 in self.heads:
            q = nc.relu(o_prev @ M1 + b1)
            Y = nc.relu(H @ M2 + b2)
            alpha = nc.softmax(Y @ q)
            outs.append(alpha @ H)
            alphas.append(alpha)
        s = outs[0] if len(outs) == 1 else nc.concat(outs)
        return s, alphas

    def __call__(self, ids, o_prev, masks=None):
        """Return ``(s_t, [alpha per head], H)``."""
        H = self.token_states(ids, masks)
        s, alphas = self.attend(H, o_prev)
        return s, alphas, H


class UpdateNet:
    """Recurrent state updater with softplus Gamma heads."""

    def __init__(self, params, cfg: RealtimeConfig):
        self.cfg = cfg
        self.P = params.glorot("upd.P", cfg.n_features, cfg.state)
        n_in = cfg.n_features + cfg.summary_width + 1
        self.gru = GRUCell(params, "upd.gru", n_in, cfg.state, cfg.layer_norm)
        self.v_k = params.add("upd.v_k", _glorot_vec(params.rng, cfg.state))
        self.beta_k = params.zeros("upd.beta_k", ())
        self.v_theta = params.add("upd.v_theta", _glorot_vec(params.rng, cfg.state))
        self.beta_theta = params.zeros("upd.beta_theta", ())

    def initial_state(self, f):
        return nc.constant(f) @ self.P

    def __call__(self, o_prev, f, s, elapsed_h, masks=None):
        if elapsed_h < 0:
            raise ModelError(f"elapsed time must be >= 0, got {elapsed_h}")
        masks = masks or {}
        x = nc.concat([nc.constant(f), s, nc.constant(np.array([math.log1p(elapsed_h)]))])
        o = self.gru.step(x, o_prev, masks.get("upd.x"), masks.get("upd.h"))
        k = nc.softplus(o @ self.v_k + self.beta_k)
        theta = nc.softplus(o @ self.v_theta + self.beta_theta)
        return o, k, theta


@dataclass
class LogStep:
    """Model outputs after one repair log."""

    k: object
    theta: object
    alphas: list
    state: object


class RealtimeModel:
    def __init__(self, cfg: RealtimeConfig, seed=0, params=None):
        self.cfg = cfg
        self.params = params if params is not None else nc.ParamSet(seed)
        self.encoder = LogEncoder(self.params, cfg)
        self.update = UpdateNet(self.params, cfg)

    def forward(self, f, logs, masks=None, log_masks=None):
        """Run the update chain over ``logs`` = ``[(ids, elapsed_h), ...]``."""
        f = np.asarray(f, dtype=np.float64)
        if f.shape != (self.cfg.n_features,):
            raise nc.ShapeError("predict_sequence", f.shape, (self.cfg.n_features,))
        times = [t for _, t in logs]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ModelError("repair logs must be in time order")
        o = self.update.initial_state(f)
        steps = []
        if not logs:
            return steps
        # token states do not depend on the update state
        Hs = self.encoder.token_states_many([ids for ids, _ in logs], log_masks)
        for H, (_, elapsed) in zip(Hs, logs):
            s, alphas = self.encoder.attend(H, o)
            o, k, theta = self.update(o, f, s, elapsed, masks)
            steps.append(LogStep(k, theta, alphas, o))
        return steps

    def loss(self, f, logs, targets, masks=None, log_masks=None):
        steps = self.forward(f, logs, masks, log_masks)
        total = None
        for st, d in zip(steps, targets):
            term = nll_node(d, st.k, st.theta)
            total = term if total is None else total + term
        return total, steps

    def predict(self, f, logs):
        with nc.no_grad():
            steps = self.forward(f, logs)
        return [GammaParams(st.k.item(), st.theta.item()) for st in steps], \
               [[a.data.copy() for a in st.alphas] for st in steps]


def predict_sequence(initial, realtime, f, logs):
    """Initial prediction followed by one prediction per log.

    ``f`` is the standardized onset vector, ``logs`` a time-ordered list of
    ``(token ids, elapsed hours)``.
    """
    first = initial.predict(f) if initial is not None else None
    if not logs:
        return [first]
    rest, _ = realtime.predict(f, logs)
    return [first] + rest

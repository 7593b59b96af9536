"""Small define-by-run reverse-mode autodiff over dense float64 arrays.

Every op builds a :class:`Value` that remembers its parents and a local
backward rule.  ``backward(root)`` walks the graph in reverse topological
order.  Gradients of intermediate nodes are computed in a per-call buffer
and then added onto ``.grad``, so calling ``backward`` twice accumulates
exactly twice the gradient on every node.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import threading

import numpy as np

__all__ = [
    "NumcoreError",
    "ShapeError",
    "NonFiniteError",
    "Value",
    "ParamSet",
    "constant",
    "make_node",
    "no_grad",
    "backward",
    "grad_check",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "concat",
    "stack",
    "relu",
    "softplus",
    "softmax",
    "sigmoid",
    "tanh",
    "log",
    "exp",
    "layer_norm",
    "reshape",
    "getitem",
    "take_rows",
    "vsum",
    "save_checkpoint",
    "load_checkpoint",
]

LN_EPS = 1e-5
_TINY = np.finfo(np.float64).tiny


class NumcoreError(Exception):
    pass


class ShapeError(NumcoreError, ValueError):
    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        shown = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shown}")


class NonFiniteError(NumcoreError, FloatingPointError):
    pass


_state = threading.local()


def _grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on this thread (inference only)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Value:
    """A node in the computation graph.

    ``data`` is always a float64 ndarray (0-d for scalars).  ``grad`` has
    the same shape; it starts at zero on leaves and is None on op outputs
    until ``backward`` reaches them.
    """

    __slots__ = ("data", "grad", "parents", "backward_fn", "op", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad = np.zeros_like(arr)
        self.parents = ()
        self.backward_fn = None
        self.op = "leaf"
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        label = self.name or self.op
        return f"Value({label}, shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def constant(x):
    return x if isinstance(x, Value) else Value(x)


def _check_finite(op, *arrays):
    for a in arrays:
        if not np.isfinite(a).all():
            raise NonFiniteError(f"{op}: non-finite input")


def make_node(data, parents, backward_fn, op):
    """Wrap ``data`` as the output of ``op``.

    ``backward_fn(g)`` receives the upstream gradient and returns one
    gradient (or None) per parent, in order.
    """
    out = Value.__new__(Value)
    out.data = data
    # intermediate grads are materialized by backward()
    out.grad = None
    out.op = op
    out.name = None
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.parents = parents
        out.backward_fn = backward_fn
        out.requires_grad = True
    else:
        out.parents = ()
        out.backward_fn = None
        out.requires_grad = False
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    if a.shape == b.shape:
        return a.shape
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ----------------------------------------------------------------------
# primitives
# ----------------------------------------------------------------------


def add(a, b):
    a, b = constant(a), constant(b)
    _broadcast_shape("add", a.data, b.data)
    _check_finite("add", a.data, b.data)
    sa, sb = a.data.shape, b.data.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_node(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = constant(a), constant(b)
    _broadcast_shape("sub", a.data, b.data)
    _check_finite("sub", a.data, b.data)
    sa, sb = a.data.shape, b.data.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return make_node(a.data - b.data, (a, b), bw, "sub")


def neg(a):
    a = constant(a)
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    """Elementwise product (numpy broadcasting)."""
    a, b = constant(a), constant(b)
    _broadcast_shape("mul", a.data, b.data)
    _check_finite("mul", a.data, b.data)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return make_node(ad * bd, (a, b), bw, "mul")


def matmul(a, b):
    """Matrix product for 1-d/2-d operands, with numpy's vector rules."""
    a, b = constant(a), constant(b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0 or ad.ndim > 2 or bd.ndim > 2:
        raise ShapeError("matmul", ad.shape, bd.shape)
    if ad.shape[-1] != bd.shape[0]:
        raise ShapeError("matmul", ad.shape, bd.shape)
    _check_finite("matmul", ad, bd)

    def bw(g):
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if ad.ndim == 1:
            return bd @ g, np.outer(ad, g)
        if bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g @ bd.T, ad.T @ g

    return make_node(np.asarray(ad @ bd, dtype=np.float64), (a, b), bw, "matmul")


def concat(values, axis=-1):
    values = [constant(v) for v in values]
    arrays = [v.data for v in values]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError:
        raise ShapeError("concat", *[x.shape for x in arrays]) from None
    _check_finite("concat", *arrays)
    ax = axis if axis >= 0 else out.ndim + axis
    bounds = np.cumsum([x.shape[ax] for x in arrays])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_node(out, tuple(values), bw, "concat")


def stack(values):
    """Stack equal-shape Values along a new leading axis."""
    values = [constant(v) for v in values]
    arrays = [v.data for v in values]
    if len({x.shape for x in arrays}) > 1:
        raise ShapeError("stack", *[x.shape for x in arrays])
    out = np.stack(arrays)
    _check_finite("stack", out)

    def bw(g):
        return tuple(g)

    return make_node(out, tuple(values), bw, "stack")


def relu(a):
    a = constant(a)
    _check_finite("relu", a.data)
    mask = a.data > 0  # subgradient at 0 is 0
    return make_node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def _sigmoid_np(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(a):
    a = constant(a)
    x = a.data
    _check_finite("softplus", x)
    # floor keeps the result positive where exp(x) underflows (x < -745)
    out = np.maximum(np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))), _TINY)
    s = _sigmoid_np(x)
    return make_node(out, (a,), lambda g: (g * s,), "softplus")


def sigmoid(a):
    a = constant(a)
    _check_finite("sigmoid", a.data)
    s = _sigmoid_np(a.data)
    return make_node(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a):
    a = constant(a)
    _check_finite("tanh", a.data)
    t = np.tanh(a.data)
    return make_node(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def softmax(a):
    """Softmax over the last axis."""
    a = constant(a)
    x = a.data
    if x.ndim == 0:
        raise ShapeError("softmax", x.shape)
    _check_finite("softmax", x)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return make_node(s, (a,), bw, "softmax")


def log(a):
    a = constant(a)
    x = a.data
    _check_finite("log", x)
    if (x <= 0).any():
        raise NonFiniteError("log: non-positive input")
    return make_node(np.log(x), (a,), lambda g: (g / x,), "log")


def exp(a):
    a = constant(a)
    _check_finite("exp", a.data)
    e = np.exp(a.data)
    return make_node(e, (a,), lambda g: (g * e,), "exp")


def layer_norm(a, gain=None, bias=None, eps=LN_EPS):
    """Normalize over the last axis, then apply optional gain and bias.

    A constant row maps to zeros (before gain/bias) because ``eps`` keeps the
    denominator positive.
    """
    a = constant(a)
    x = a.data
    if x.ndim == 0:
        raise ShapeError("layer_norm", x.shape)
    _check_finite("layer_norm", x)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    parents = [a]
    out = xhat
    gd = None
    if gain is not None:
        gain = constant(gain)
        _broadcast_shape("layer_norm", x, gain.data)
        gd = gain.data
        out = out * gd
        parents.append(gain)
    if bias is not None:
        bias = constant(bias)
        _broadcast_shape("layer_norm", x, bias.data)
        out = out + bias.data
        parents.append(bias)
    has_gain, has_bias = gain is not None, bias is not None

    def bw(g):
        dxhat = g * gd if has_gain else g
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [dx]
        if has_gain:
            grads.append(_unbroadcast(g * xhat, gd.shape))
        if has_bias:
            grads.append(_unbroadcast(g, bias.data.shape))
        return tuple(grads)

    return make_node(out, tuple(parents), bw, "layer_norm")


def reshape(a, shape):
    a = constant(a)
    src = a.data.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, shape) from None
    return make_node(out, (a,), lambda g: (g.reshape(src),), "reshape")


def getitem(a, idx):
    a = constant(a)
    src = a.data.shape
    out = np.array(a.data[idx], dtype=np.float64)

    def bw(g):
        full = np.zeros(src)
        np.add.at(full, idx, g)
        return (full,)

    return make_node(out, (a,), bw, "getitem")


def take_rows(table, indices):
    """Gather rows of a 2-d table (embedding lookup)."""
    table = constant(table)
    idx = np.asarray(indices, dtype=np.int64)
    if table.data.ndim != 2 or idx.ndim != 1:
        raise ShapeError("take_rows", table.data.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise IndexError(f"take_rows: index out of range for {table.data.shape[0]} rows")
    src = table.data.shape

    def bw(g):
        full = np.zeros(src)
        np.add.at(full, idx, g)
        return (full,)

    return make_node(table.data[idx], (table,), bw, "take_rows")


def vsum(a, axis=None):
    a = constant(a)
    src = a.data.shape
    out = np.asarray(a.data.sum(axis=axis), dtype=np.float64)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return make_node(out, (a,), bw, "sum")


# ----------------------------------------------------------------------
# backward pass
# ----------------------------------------------------------------------


def _topo_order(root):
    order = []
    seen = set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root):
    """Accumulate d(root)/d(node) into ``.grad`` of every ancestor."""
    if root.data.size != 1:
        raise ShapeError("backward", root.data.shape, ())
    order = _topo_order(root)
    buf = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = buf.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g
        else:
            node.grad = node.grad + g
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = buf.get(key)
            buf[key] = pg if prev is None else prev + pg


# ----------------------------------------------------------------------
# parameters
# ----------------------------------------------------------------------


class ParamSet:
    """Named trainable leaves plus the seed that initialized them."""

    def __init__(self, seed=0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self._params = {}

    def __contains__(self, name):
        return name in self._params

    def __getitem__(self, name):
        return self._params[name]

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def add(self, name, data):
        if name in self._params:
            raise KeyError(f"parameter {name!r} registered twice")
        v = Value(data, requires_grad=True, name=name)
        self._params[name] = v
        return v

    def glorot(self, name, fan_in, fan_out):
        limit = np.sqrt(6.0 / max(fan_in + fan_out, 1))
        return self.add(name, self.rng.uniform(-limit, limit, size=(fan_in, fan_out)))

    def zeros(self, name, shape):
        return self.add(name, np.zeros(shape))

    def ones(self, name, shape):
        return self.add(name, np.ones(shape))

    def uniform(self, name, shape, scale):
        return self.add(name, self.rng.uniform(-scale, scale, size=shape))

    def zero_grad(self):
        for v in self._params.values():
            v.grad = np.zeros_like(v.data)

    def clear_grad(self):
        """Drop grads to None (read as zero); cheaper than ``zero_grad``."""
        for v in self._params.values():
            v.grad = None

    def count(self):
        return sum(v.data.size for v in self._params.values())

    def snapshot(self):
        return {k: v.data.copy() for k, v in self._params.items()}

    def restore(self, snap):
        if set(snap) != set(self._params):
            raise KeyError("snapshot does not match parameter names")
        for k, arr in snap.items():
            if arr.shape != self._params[k].data.shape:
                raise ShapeError("restore", arr.shape, self._params[k].data.shape)
            self._params[k].data = np.array(arr, dtype=np.float64)


def grad_check(loss_builder, params, eps=1e-4):
    """Compare analytic gradients with central differences.

    ``loss_builder()`` must rebuild the scalar loss from the current
    parameter data.  Returns the maximum over all parameter entries of
    ``|ga - gn| / max(1e-8, |ga| + |gn|)``.
    """
    first = loss_builder().item()
    second = loss_builder().item()
    if first != second:
        raise NumcoreError("grad_check: loss builder is not deterministic")
    params.zero_grad()
    backward(loss_builder())
    worst = 0.0
    for _, p in params.items():
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        ga_flat = analytic.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = loss_builder().item()
                flat[i] = orig - eps
                down = loss_builder().item()
                flat[i] = orig
                gn = (up - down) / (2.0 * eps)
                ga = ga_flat[i]
                err = abs(ga - gn) / max(1e-8, abs(ga) + abs(gn))
                worst = max(worst, err)
    params.zero_grad()
    return worst


# ----------------------------------------------------------------------
# checkpoint container
# ----------------------------------------------------------------------

CHECKPOINT_FORMAT = "outagecast-checkpoint/1"


def config_hash(config):
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, params, config, meta=None):
    """Write parameters as an ``.npz`` archive.

    Each parameter is stored under its own name as a row-major float64
    array; the reserved ``__meta__`` entry holds a JSON document with the
    format tag, config, config hash, seed and any extra metadata.
    """
    header = {
        "format": CHECKPOINT_FORMAT,
        "config": config,
        "config_hash": config_hash(config),
        "seed": params.seed,
        "shapes": {k: list(v.data.shape) for k, v in params.items()},
        "meta": meta or {},
    }
    arrays = {k: np.array(v.data, dtype=np.float64, order="C") for k, v in params.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Return ``(arrays, header)`` from a file written by ``save_checkpoint``."""
    with np.load(path, allow_pickle=False) as z:
        if "__meta__" not in z.files:
            raise NumcoreError(f"{path}: not a checkpoint (no metadata)")
        header = json.loads(bytes(z["__meta__"]).decode())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise NumcoreError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
        shapes = header.get("shapes", {})
        arrays = {}
        for k in z.files:
            if k == "__meta__":
                continue
            a = np.array(z[k], dtype=np.float64)
            if k in shapes and a.size == int(np.prod(shapes[k])):
                a = a.reshape(shapes[k])
            arrays[k] = a
    return arrays, header

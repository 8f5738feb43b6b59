"""A small dense-array autodiff engine on top of numpy.

Operations executed inside an active :class:`Tape` are recorded together with a
closure mapping the output gradient to the gradients of the inputs. Calling
``tape.backward(loss)`` replays the records in reverse order, so each node is
visited exactly once and no topological sort is needed.

Only the operations the segmentation network needs are provided.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DisconnectedLoss, NumericError, ShapeMismatch

__all__ = [
    "Tensor",
    "Tape",
    "parameter",
    "backward",
    "no_tape",
    "add", "mul", "matmul", "linear", "conv1d", "depthwise_conv1d",
    "layer_norm", "batch_norm", "sigmoid", "silu", "softplus", "exp", "log",
    "tanh", "relu", "abs", "softmax", "log_softmax", "elementwise",
    "take", "gather_rows", "segment_max", "concat", "sum", "mean",
    "finite_diff_check", "FDReport", "segment_ids_from_lengths",
]

_TAPES: list["Tape"] = []
CHECK_FINITE = True


class Tensor:
    """A numpy array plus an optional accumulated gradient."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, no_decay: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64) if not isinstance(data, np.ndarray) or data.dtype.kind != "f" else data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.no_decay = no_decay

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def parameter(data, name: str | None = None, no_decay: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name, no_decay=no_decay)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class Tape:
    """Records differentiable operations executed while it is active."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple, object]] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out: Tensor, parents, backward_fn):
        self.nodes.append((out, tuple(parents), backward_fn))

    def backward(self, loss: Tensor, retain: bool = False) -> dict:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad``; return {leaf: grad}."""
        if loss.data.size != 1:
            raise ValueError("loss must be a scalar")
        if not self.nodes or not loss.requires_grad or not any(n[0] is loss for n in reversed(self.nodes)):
            raise DisconnectedLoss("loss was not produced by a recorded operation on this tape")
        grads = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        produced = set()
        for out, parents, fn in reversed(self.nodes):
            produced.add(id(out))
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for p, pg in zip(parents, fn(g)):
                if pg is None or not isinstance(p, Tensor) or not p.requires_grad:
                    continue
                key = id(p)
                leaves.setdefault(key, p)
                grads[key] = grads[key] + pg if key in grads else pg
        result = {}
        for key, g in grads.items():
            if key in produced:
                continue
            leaf = leaves[key]
            g = np.asarray(g).reshape(leaf.shape)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
            result[leaf] = g
        if not retain:
            self.nodes.clear()
        return result


def backward(tape: Tape, loss: Tensor) -> dict:
    return tape.backward(loss)


class no_tape:
    """Temporarily disable recording (inference)."""

    def __enter__(self):
        self._saved = list(_TAPES)
        _TAPES.clear()

    def __exit__(self, *exc):
        _TAPES.extend(self._saved)
        return False


def _result(data, parents, backward_fn) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericError("operation produced non-finite values")
    out = Tensor(data)
    if _TAPES and any(isinstance(p, Tensor) and p.requires_grad for p in parents):
        out.requires_grad = True
        _TAPES[-1].record(out, parents, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, a.shape) if a.requires_grad else None,
                              _unbroadcast(g * ad, b.shape) if b.requires_grad else None))


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _result(out, (a,), lambda g: (-g * out * out,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ShapeMismatch(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(ad @ bd, (a, b), bw)


def linear(x, W, b=None) -> Tensor:
    """``x @ W + b`` over the last axis; W has shape (C_in, C_out)."""
    x, W = _as_tensor(x), _as_tensor(W)
    if x.shape[-1] != W.shape[0]:
        raise ShapeMismatch(f"linear: input has {x.shape[-1]} channels, weight expects {W.shape[0]}")
    xd, wd = x.data, W.data
    y = xd @ wd
    parents = [x, W]
    if b is not None:
        b = _as_tensor(b)
        y = y + b.data
        parents.append(b)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g @ wd.T) if x.requires_grad else None
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2 if W.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(y, parents, bw)


def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis, keepdims), 1.0 / max(int(n), 1))


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    inv = None if axes is None else np.argsort(axes)
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(xs, axis=-1) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _result(np.concatenate([x.data for x in xs], axis=axis), xs,
                   lambda g: tuple(np.split(g, sizes, axis=axis)))


# ---------------------------------------------------------------- pointwise

def _sigmoid(z):
    # exact 0.5 at z == 0; avoids overflow for large |z|
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    s = _sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x) -> Tensor:
    x = _as_tensor(x)
    s = _sigmoid(x.data)
    return _result(x.data * s, (x,), lambda g: (g * (s * (1.0 + x.data * (1.0 - s))),))


def softplus(x) -> Tensor:
    x = _as_tensor(x)
    return _result(np.logaddexp(0.0, x.data), (x,), lambda g: (g * _sigmoid(x.data),))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    e = np.exp(x.data)
    return _result(e, (x,), lambda g: (g * e,))


def log(x) -> Tensor:
    x = _as_tensor(x)
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    t = np.tanh(x.data)
    return _result(t, (x,), lambda g: (g * (1.0 - t * t),))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    m = x.data > 0
    return _result(x.data * m, (x,), lambda g: (g * m,))


def abs(x) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    s = np.sign(x.data)
    return _result(np.abs(x.data), (x,), lambda g: (g * s,))


def softmax(x, axis=-1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    return _result(p, (x,), lambda g: (p * (g - (g * p).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis=-1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _result(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


_ELEMENTWISE = {
    "sigmoid": sigmoid, "silu": silu, "exp": exp, "softplus": softplus,
    "softmax_rowwise": softmax, "tanh": tanh, "relu": relu, "log": log, "abs": abs,
}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch by name: add, mul, sigmoid, silu, softmax_rowwise, exp, softplus, ..."""
    if op == "add":
        return add(a, b)
    if op == "mul":
        return mul(a, b)
    return _ELEMENTWISE[op](a)


# ---------------------------------------------------------------- indexing

def take(x, idx, permutation: bool = False) -> Tensor:
    """Gather along axis 0. ``permutation=True`` promises ``idx`` is a bijection."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.shape

    def bw(g):
        if permutation:
            gx = np.empty(shape)
            gx[idx] = g
            return (gx,)
        gx = np.zeros(shape)
        np.add.at(gx, idx, g)
        return (gx,)

    return _result(x.data[idx], (x,), bw)


def gather_rows(x, idx) -> Tensor:
    """Like :func:`take` but ``idx < 0`` yields a zero row that carries no gradient."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    valid = idx >= 0
    safe = np.where(valid, idx, 0)
    out = x.data[safe] * valid[..., None]
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape)
        np.add.at(gx, safe[valid], g[valid])
        return (gx,)

    return _result(out, (x,), bw)


def segment_max(x, seg: np.ndarray, num_segments: int) -> Tensor:
    """Row-wise max of ``x`` (M, C) within each segment; ties share the gradient."""
    x = _as_tensor(x)
    seg = np.asarray(seg, dtype=np.int64)
    order = np.argsort(seg, kind="stable")
    seg_sorted = seg[order]
    counts = np.bincount(seg_sorted, minlength=num_segments)
    if np.any(counts == 0):
        raise ShapeMismatch("segment_max: empty segment")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    xs = x.data[order]
    out = np.maximum.reduceat(xs, starts, axis=0)

    def bw(g):
        hit = xs == out[seg_sorted]
        n_hit = np.add.reduceat(hit.astype(np.float64), starts, axis=0)
        gs = hit * (g / n_hit)[seg_sorted]
        gx = np.empty_like(gs)
        gx[order] = gs
        return (gx,)

    return _result(out, (x,), bw)


# ---------------------------------------------------------------- convolution

def segment_ids_from_lengths(lengths, total: int | None = None) -> np.ndarray:
    lengths = np.asarray(lengths, dtype=np.int64)
    ids = np.repeat(np.arange(len(lengths)), lengths)
    if total is not None and total > len(ids):
        # padding gets its own id per position so it never neighbours anything
        ids = np.concatenate([ids, -1 - np.arange(total - len(ids))])
    return ids


def _shift(a: np.ndarray, off: int) -> np.ndarray:
    """out[..., l, :] = a[..., l + off, :], zero outside."""
    if off == 0:
        return a
    out = np.zeros_like(a)
    L = a.shape[-2]
    if off > 0:
        out[..., : L - off, :] = a[..., off:, :]
    else:
        out[..., -off:, :] = a[..., : L + off, :]
    return out


def _conv_masks(L: int, k: int, seg) -> list[np.ndarray]:
    """Validity of neighbour l+off for each offset; shape broadcastable to (..., L, 1)."""
    half = k // 2
    pos = np.arange(L)
    masks = []
    for off in range(-half, half + 1):
        inside = (pos + off >= 0) & (pos + off < L)
        if seg is None:
            m = inside
        else:
            s = np.asarray(seg)
            nb = _shift(s[..., None], off)[..., 0]
            m = inside & (nb == s)
        masks.append(m.astype(np.float64)[..., None])
    return masks


def _check_seg(seg, lengths, row_lengths, L):
    if lengths is not None:
        return segment_ids_from_lengths(lengths, L)
    if row_lengths is not None:
        # one valid-prefix length per leading row; the tail is padding
        pos = np.arange(L)
        return np.where(pos < np.asarray(row_lengths)[..., None], 0, -1 - pos)
    return seg


def conv1d(x, K, b=None, segment_ids=None, lengths=None, row_lengths=None) -> Tensor:
    """Same-length cross-correlation along axis -2.

    ``x`` (..., L, C_in), ``K`` (k, C_in, C_out) with odd k. Neighbours are only
    read inside the same segment: pass ``segment_ids`` (broadcastable to
    (..., L)), ``lengths`` (consecutive segment lengths along the sequence) or
    ``row_lengths`` (one valid-prefix length per leading row, rest is padding).
    """
    x, K = _as_tensor(x), _as_tensor(K)
    k, cin, cout = K.shape
    if k % 2 == 0:
        raise ShapeMismatch("conv1d kernel width must be odd")
    if x.shape[-1] != cin:
        raise ShapeMismatch(f"conv1d: input has {x.shape[-1]} channels, kernel expects {cin}")
    L = x.shape[-2]
    seg = _check_seg(segment_ids, lengths, row_lengths, L)
    masks = _conv_masks(L, k, seg)
    half = k // 2
    cols = np.concatenate([_shift(x.data, off) * m for off, m in zip(range(-half, half + 1), masks)], axis=-1)
    Kr = K.data.reshape(k * cin, cout)
    y = cols @ Kr
    parents = [x, K]
    if b is not None:
        b = _as_tensor(b)
        y = y + b.data
        parents.append(b)

    def bw(g):
        gK = (cols.reshape(-1, k * cin).T @ g.reshape(-1, cout)).reshape(k, cin, cout) if K.requires_grad else None
        gx = None
        if x.requires_grad:
            gcol = g @ Kr.T
            gx = np.zeros(x.shape)
            for j, (off, m) in enumerate(zip(range(-half, half + 1), masks)):
                gx += _shift(gcol[..., j * cin:(j + 1) * cin] * m, -off)
        out = (gx, gK)
        if b is not None:
            out += (g.reshape(-1, cout).sum(axis=0),)
        return out

    return _result(y, parents, bw)


def depthwise_conv1d(x, K, b=None, segment_ids=None, lengths=None, row_lengths=None) -> Tensor:
    """Per-channel conv along axis -2; ``K`` has shape (k, C)."""
    x, K = _as_tensor(x), _as_tensor(K)
    k, c = K.shape
    if k % 2 == 0 or x.shape[-1] != c:
        raise ShapeMismatch("depthwise_conv1d: bad kernel shape")
    L = x.shape[-2]
    seg = _check_seg(segment_ids, lengths, row_lengths, L)
    masks = _conv_masks(L, k, seg)
    half = k // 2
    shifted = [_shift(x.data, off) * m for off, m in zip(range(-half, half + 1), masks)]
    y = np.zeros(x.shape)
    for j, s in enumerate(shifted):
        y += s * K.data[j]
    parents = [x, K]
    if b is not None:
        b = _as_tensor(b)
        y = y + b.data
        parents.append(b)

    def bw(g):
        gK = np.stack([(g * s).reshape(-1, c).sum(axis=0) for s in shifted]) if K.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = np.zeros(x.shape)
            for j, (off, m) in enumerate(zip(range(-half, half + 1), masks)):
                gx += _shift(g * K.data[j] * m, -off)
        out = (gx, gK)
        if b is not None:
            out += (g.reshape(-1, c).sum(axis=0),)
        return out

    return _result(y, parents, bw)


# ---------------------------------------------------------------- normalization

def layer_norm(x, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    x = _as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    y = xhat
    parents = [x]
    if gamma is not None:
        gamma, beta = _as_tensor(gamma), _as_tensor(beta)
        y = xhat * gamma.data + beta.data
        parents += [gamma, beta]

    def bw(g):
        gxhat = g * gamma.data if gamma is not None else g
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        if gamma is None:
            return (gx,)
        c = x.shape[-1]
        return gx, (g * xhat).reshape(-1, c).sum(axis=0), g.reshape(-1, c).sum(axis=0)

    return _result(y, parents, bw)


@dataclass
class BatchNormState:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    training: bool = True


def batch_norm(x, gamma, beta, state: BatchNormState, eps: float = 1e-5) -> Tensor:
    """Normalize each channel over all leading positions of ``x`` (..., C)."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    c = x.shape[-1]
    x2 = x.data.reshape(-1, c)
    if state.training:
        mu = x2.mean(axis=0)
        var = x2.var(axis=0)
        n = x2.shape[0]
        state.mean = (1 - state.momentum) * state.mean + state.momentum * mu
        state.var = (1 - state.momentum) * state.var + state.momentum * var * n / max(n - 1, 1)
    else:
        mu, var = state.mean, state.var
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x2 - mu) * rstd
    y = (xhat * gamma.data + beta.data).reshape(x.shape)
    training = state.training

    def bw(g):
        g2 = g.reshape(-1, c)
        gxhat = g2 * gamma.data
        if training:
            gx = rstd * (gxhat - gxhat.mean(axis=0) - xhat * (gxhat * xhat).mean(axis=0))
        else:
            gx = gxhat * rstd
        return gx.reshape(x.shape), (g2 * xhat).sum(axis=0), g2.sum(axis=0)

    return _result(y, (x, gamma, beta), bw)


# ---------------------------------------------------------------- gradient checking

@dataclass
class FDReport:
    passed: bool
    max_rel_error: float
    tol: float
    per_input: dict = field(default_factory=dict)

    def __bool__(self):
        return self.passed


def finite_diff_check(f, inputs, step: float = 1e-5, tol: float = 1e-4,
                      samples: int | None = None, seed: int = 0, abs_floor: float = 1e-5) -> FDReport:
    """Compare tape gradients with central differences.

    ``f`` is a zero-argument callable returning a scalar Tensor computed from
    ``inputs`` (tensors with ``requires_grad``). The error per input is
    ``max|g_tape - g_fd| / max(max|g_fd|, max|g_tape|, abs_floor)`` over the
    checked coordinates; the floor keeps exactly-zero gradients (e.g. a bias
    feeding a normalization) from comparing rounding noise to itself. With
    ``samples`` set, only that many random coordinates plus one random
    direction are checked per input.
    """
    rng = np.random.default_rng(seed)
    for t in inputs:
        t.grad = None
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]

    def value():
        with no_tape():
            return float(f().data)

    per_input = {}
    worst = 0.0
    for i, (t, ga) in enumerate(zip(inputs, analytic)):
        flat = t.data.reshape(-1)
        coords = range(flat.size) if samples is None or samples >= flat.size else rng.choice(flat.size, samples, replace=False)
        num, ana = [], []
        for j in coords:
            old = flat[j]
            flat[j] = old + step
            fp = value()
            flat[j] = old - step
            fm = value()
            flat[j] = old
            num.append((fp - fm) / (2 * step))
            ana.append(ga.reshape(-1)[j])
        if samples is not None:
            d = rng.standard_normal(t.shape)
            base = t.data.copy()
            t.data[...] = base + step * d
            fp = value()
            t.data[...] = base - step * d
            fm = value()
            t.data[...] = base
            num.append((fp - fm) / (2 * step))
            ana.append(float((ga * d).sum()))
        num, ana = np.asarray(num), np.asarray(ana)
        if num.size:
            scale = max(np.abs(num).max(), np.abs(ana).max(), abs_floor)
            err = float(np.abs(num - ana).max() / scale)
        else:
            err = 0.0
        per_input[t.name or f"input{i}"] = err
        worst = max(worst, err)
    for t in inputs:
        t.grad = None
    return FDReport(worst < tol and math.isfinite(worst), worst, tol, per_input)

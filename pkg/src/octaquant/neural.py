"""Minimal reverse-mode tensor engine.

Only the layers the segmentation network needs are provided: convolution,
ReLU-6, batch normalization, dropout, 2x2 max pooling, nearest-neighbour
upsampling, channel concatenation and a two-class softmax cross-entropy.
Arrays keep the dtype they were created with, so the same code runs in
float32 for training and float64 for gradient verification.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class GraphConsumedError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Propagate gradients from this scalar node to every leaf that requires them.

        The recorded graph is released afterwards; a second call on the same
        node raises :class:`GraphConsumedError`.
        """
        if self._consumed:
            raise GraphConsumedError("backward() already called on this graph; run a new forward pass")
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
        self._consumed = True

    # small algebra used by tests and losses
    def __add__(self, other):
        other = _as_tensor(other, self.dtype)
        return _make(self.data + other.data, (self, other), lambda g: (g, g))

    def __mul__(self, other):
        other = _as_tensor(other, self.dtype)
        a, b = self.data, other.data
        return _make(a * b, (self, other), lambda g: (g * b, g * a))

    def sum(self):
        shape = self.shape
        return _make(self.data.sum(keepdims=False).reshape(()), (self,),
                     lambda g: (np.broadcast_to(g, shape).copy(),))

    def mean(self):
        n = self.data.size
        shape = self.shape
        return _make(np.asarray(self.data.mean(), dtype=self.dtype), (self,),
                     lambda g: (np.full(shape, g / n, dtype=self.dtype),))

    def reshape(self, *shape):
        old = self.shape
        return _make(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),))


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)


def _batched(x: Tensor, op, *args, **kwargs):
    # lets the 3-D (C, H, W) calling convention share the 4-D kernels
    if x.data.ndim == 3:
        out = op(x.reshape(1, *x.shape), *args, **kwargs)
        if isinstance(out, tuple):
            return (out[0].reshape(*out[0].shape[1:]),) + out[1:]
        return out.reshape(*out.shape[1:])
    return op(x, *args, **kwargs)


# --------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation of ``x`` (N,C,H,W or C,H,W) with ``kernels`` (O,C,k,k)."""
    return _batched(x, _conv2d, kernels, bias, padding)


def _im2col_t(xp: np.ndarray, k: int, ho: int, wo: int) -> np.ndarray:
    """Columns of a padded (N,C,H,W) array laid out as (C*k*k, N*ho*wo)."""
    n, c = xp.shape[:2]
    if k == 1:
        return xp.transpose(1, 0, 2, 3).reshape(c, n * ho * wo)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # n,c,ho,wo,k,k
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * ho * wo)


def _pad(a: np.ndarray, p: int) -> np.ndarray:
    if not p:
        return a
    return np.pad(a, ((0, 0), (0, 0), (p, p), (p, p)))


def _conv2d(x: Tensor, w: Tensor, b: Tensor | None, padding: int) -> Tensor:
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels (shape {x.shape}) "
                         f"but kernels expect {ci} (shape {w.shape})")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernels must be square with odd size, got {w.shape}")
    if padding < 0:
        raise ShapeError("conv2d: padding must be >= 0")
    k = kh
    ho, wo = h + 2 * padding - k + 1, wd + 2 * padding - k + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {w.shape} with padding {padding}")

    cols = _im2col_t(_pad(x.data, padding), k, ho, wo)
    wmat = w.data.reshape(o, c * k * k)
    out = wmat @ cols
    if b is not None:
        out += b.data[:, None]
    out = np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, n * ho * wo)
        gw = (gt @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            # input gradient = full correlation of g with the spatially rotated, channel-swapped kernels
            q = k - 1 - padding
            if q >= 0:
                gcols = _im2col_t(_pad(g, q), k, h, wd)
                wrot = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, o * k * k)
                gx = (wrot @ gcols).reshape(c, n, h, wd).transpose(1, 0, 2, 3)
            else:
                gxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=g.dtype)
                dcols = (wmat.T @ gt).reshape(c, k, k, n, ho, wo)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i:i + ho, j:j + wo] += dcols[:, i, j].transpose(1, 0, 2, 3)
                gx = gxp[:, :, padding:padding + h, padding:padding + wd]
            gx = np.ascontiguousarray(gx)
        if b is None:
            return gx, gw
        return gx, gw, gt.sum(axis=1)

    return _make(out, parents, backward)


# --------------------------------------------------------------------------
# elementwise and resampling


def relu6(x: Tensor) -> Tensor:
    d = x.data
    out = np.minimum(np.maximum(d, 0), 6).astype(d.dtype, copy=False)
    return _make(out, (x,), lambda g: (g * ((d > 0) & (d < 6)),))


def maxpool2(x: Tensor):
    """2x2 non-overlapping max pooling; returns ``(pooled, argmax)``.

    ``argmax`` holds, per output cell, the flat index (0..3) of the winning
    element inside its window (first maximum in row-major order).
    """
    return _batched(x, _maxpool2)


def _maxpool2(x: Tensor):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: spatial extents must be even, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _make(out, (x,), backward), idx


def upsample_nearest2(x: Tensor) -> Tensor:
    return _batched(x, _upsample)


def _upsample(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _make(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def concat(tensors, axis: int = 1) -> Tensor:
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


# --------------------------------------------------------------------------
# normalization and regularization


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
              training: bool, momentum: float = 0.9, eps: float = 1e-5, update_stats: bool = True) -> Tensor:
    """Per-channel batch normalization over the batch and spatial axes.

    In training mode the batch statistics are used and, when ``update_stats``
    is set, ``running_mean``/``running_var`` are updated in place as
    ``momentum * running + (1 - momentum) * batch``.
    """
    d = x.data
    c = d.shape[1]
    shape = (1, c, 1, 1)
    if not training:
        scale = gamma.data / np.sqrt(running_var + eps)
        out = (d - running_mean.reshape(shape)) * scale.reshape(shape) + beta.data.reshape(shape)
        out = out.astype(d.dtype, copy=False)

        def backward_infer(g):
            gx = g * scale.reshape(shape)
            xhat = (d - running_mean.reshape(shape)) / np.sqrt(running_var + eps).reshape(shape)
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return _make(out, (x, gamma, beta), backward_infer)

    m = d.shape[0] * d.shape[2] * d.shape[3]
    if m < 2:
        raise ShapeError("batchnorm: training mode needs at least 2 values per channel")
    mean = d.mean(axis=(0, 2, 3))
    xc = d - mean.reshape(shape)
    var = (xc * xc).mean(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)
    if update_stats:
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var * (m / (m - 1))

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma.data.reshape(shape)
        gx = (inv.reshape(shape) / m) * (
            m * gxhat - gxhat.sum(axis=(0, 2, 3)).reshape(shape) - xhat * (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(shape))
        return gx, gg, gb

    return _make(out, (x, gamma, beta), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator | int | None, training: bool) -> Tensor:
    """Inverted dropout. ``rng`` may be a Generator or an integer seed."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0:
        return x
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    keep = rng.random(x.shape, dtype=np.float32) >= p
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    mask = keep * scale
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


# --------------------------------------------------------------------------
# loss


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean per-pixel two-class softmax cross-entropy.

    ``logits`` is (N, 2, H, W) or (2, H, W); ``target`` a boolean mask with the
    matching spatial shape where True marks class 1 (vessel).
    """
    if logits.data.ndim == 3:
        logits = logits.reshape(1, *logits.shape)
    t = np.asarray(target, dtype=bool)
    if t.ndim == 2:
        t = t[None]
    d = logits.data
    if d.shape[1] != 2 or d.shape[0:1] + d.shape[2:] != t.shape:
        raise ShapeError(f"softmax_cross_entropy: logits {d.shape} vs target {t.shape}")
    mx = d.max(axis=1, keepdims=True)
    z = d - mx
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    onehot = np.stack([~t, t], axis=1).astype(d.dtype)
    count = t.size
    loss = -(logp * onehot).sum() / count
    if not np.isfinite(loss):
        raise NonFiniteError("softmax_cross_entropy produced a non-finite loss")

    def backward(g):
        prob = np.exp(logp)
        return ((prob - onehot) * (g / count)).astype(d.dtype, copy=False),

    return _make(np.asarray(loss, dtype=d.dtype), (logits,), backward)


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    epsilon: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0 or self.epsilon <= 0:
            raise ValueError("learning_rate must be >= 0 and epsilon > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")


def adam_step(params: dict, grads: dict, state: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place.

    ``params`` and ``grads`` map names to arrays. Parameters without an
    entry in ``grads`` are treated as having zero gradient.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p)
            v = state.second_moment[name] = np.zeros_like(p)
        elif m.shape != p.shape:
            raise ShapeError(f"moment shape {m.shape} != parameter shape {p.shape} for {name!r}")
        if g is None:
            m *= b1
            v *= b2
        else:
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
        update = (state.learning_rate / c1) * m / (np.sqrt(v / c2) + state.epsilon)
        p -= update.astype(p.dtype, copy=False)
    return params, state

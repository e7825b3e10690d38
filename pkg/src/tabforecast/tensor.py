"""Small dense-tensor library with reverse-mode automatic differentiation.

Only the primitives the forecaster needs are provided. Every differentiable
op records its parents and a closure mapping the output gradient to one
gradient per parent; :meth:`Tensor.backward` walks the recorded graph in
reverse topological order.

Broadcasting is intentionally narrow: elementwise ops require equal shapes,
``linear`` broadcasts over leading batch dimensions, and ``scale``/``shift``
accept a constant (non-differentiable) operand of any broadcast-compatible
shape.
"""

from __future__ import annotations

import contextlib
import json
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CorruptPayload, ShapeMismatch, SignalTooShort

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype)
        if grad.shape != self.shape:
            raise ShapeMismatch(f"seed gradient {grad.shape} vs output {self.shape}")

        order = topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


def topological_order(root):
    """Nodes reachable from ``root`` (through requires_grad edges), parents first."""
    order, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a, c):
    """Multiply by a constant; ``c`` must broadcast onto ``a`` without growing it."""
    c = np.asarray(c, dtype=a.dtype)
    out = a.data * c
    if out.shape != a.shape:
        raise ShapeMismatch(f"scale: constant {c.shape} would broadcast {a.shape} to {out.shape}")
    return _make(out, (a,), lambda g: (g * c,))


def shift(a, c):
    """Add a constant; ``c`` must broadcast onto ``a`` without growing it."""
    c = np.asarray(c, dtype=a.dtype)
    out = a.data + c
    if out.shape != a.shape:
        raise ShapeMismatch(f"shift: constant {c.shape} would broadcast {a.shape} to {out.shape}")
    return _make(out, (a,), lambda g: (g,))


def relu(a):
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def sigmoid(a):
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def softmax(a, axis=-1):
    """Max-subtracted softmax along ``axis``."""
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and losses


def tsum(a):
    shape = a.shape
    return _make(np.asarray(a.data.sum(), dtype=a.dtype), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def tmean(a):
    n = a.data.size
    shape = a.shape
    return _make(np.asarray(a.data.mean(), dtype=a.dtype), (a,), lambda g: (np.full(shape, g / n, dtype=g.dtype),))


def mse_loss(pred, target):
    """Mean of squared differences over all elements."""
    pred = _as_tensor(pred)
    target = _as_tensor(target)
    _same_shape(pred, target, "mse_loss")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        gp = (2.0 / n) * g * diff
        return gp, -gp

    return _make(np.asarray(np.mean(diff * diff), dtype=pred.dtype), (pred, target), backward)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"reshape {a.shape} -> {shape}") from exc
    src = a.shape
    return _make(out, (a,), lambda g: (g.reshape(src),))


def permute(a, axes):
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeMismatch(f"permute axes {axes} invalid for rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def getitem(a, idx):
    """Basic (slice/integer) indexing; the gradient scatters back into a zero array."""
    out = np.array(a.data[idx], copy=True)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _make(out, (a,), backward)


def pad(a, pad_width):
    """Zero-pad; ``pad_width`` follows :func:`numpy.pad` (before, after) pairs."""
    pad_width = tuple(tuple(int(v) for v in p) for p in pad_width)
    if len(pad_width) != a.ndim:
        raise ShapeMismatch(f"pad width rank {len(pad_width)} vs tensor rank {a.ndim}")
    out = np.pad(a.data, pad_width)
    keep = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, a.shape))
    return _make(out, (a,), lambda g: (g[keep],))


def stack(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    for t in tensors[1:]:
        _same_shape(tensors[0], t, "stack")
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tensors, backward)


# ---------------------------------------------------------------------------
# learnable maps


def linear(x, W, b=None):
    """``x @ W + b`` with ``x`` of shape (..., in) and ``W`` of shape (in, out)."""
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeMismatch(f"linear: input {x.shape} vs weight {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise ShapeMismatch(f"linear: bias {b.shape} vs weight {W.shape}")
    xd, Wd = x.data, W.data
    out = xd @ Wd
    if b is not None:
        out = out + b.data
    n_in, n_out = Wd.shape

    def backward(g):
        g2 = g.reshape(-1, n_out)
        gx = g @ Wd.T
        gW = xd.reshape(-1, n_in).T @ g2
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    parents = (x, W) if b is None else (x, W, b)
    return _make(out, parents, backward)


def _correlate(xd, Kd):
    """Same-padded stride-1 correlation of (N, C, H, W) with (O, C, k, k); returns (out, cols)."""
    N, C, H, W = xd.shape
    O, _, k, _ = Kd.shape
    p = k // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))  # N, C, H, W, k, k
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(N * H * W, C * k * k)
    out = (cols @ Kd.reshape(O, C * k * k).T).reshape(N, H, W, O).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def conv2d(x, kernels, bias=None):
    """Stride-1 2D cross-correlation with zero "same" padding.

    ``x`` is (C_in, H, W) or (N, C_in, H, W); ``kernels`` is
    (C_out, C_in, k, k) with odd ``k``; ``bias`` is (C_out,) or None.
    """
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    Kd = kernels.data
    if xd.ndim != 4 or Kd.ndim != 4:
        raise ShapeMismatch(f"conv2d: input {x.shape}, kernels {kernels.shape}")
    N, C, H, W = xd.shape
    O, C2, k, k2 = Kd.shape
    if C != C2 or k != k2 or k % 2 == 0:
        raise ShapeMismatch(f"conv2d: input {x.shape} incompatible with kernels {kernels.shape}")
    if bias is not None and bias.shape != (O,):
        raise ShapeMismatch(f"conv2d: bias {bias.shape} vs {O} output channels")
    out, cols = _correlate(xd, Kd)
    if bias is not None:
        out += bias.data[None, :, None, None]
    if unbatched:
        out = out[0]

    def backward(g):
        g4 = g[None] if unbatched else g
        g2 = g4.transpose(0, 2, 3, 1).reshape(N * H * W, O)
        gK = (g2.T @ cols).reshape(O, C, k, k)
        # input gradient = same-padded correlation with the flipped, channel-swapped kernel
        gx, _ = _correlate(g4, np.ascontiguousarray(Kd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)))
        if unbatched:
            gx = gx[0]
        if bias is None:
            return gx, gK
        return gx, gK, g2.sum(axis=0)

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return _make(out, parents, backward)


# ---------------------------------------------------------------------------
# spectra (forward only)


def rfft_amplitude(x):
    """Channel-averaged |DFT| of a (T, d) array at frequencies 1..T//2.

    The result carries no gradient: period selection downstream is a
    discrete choice.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if data.ndim == 1:
        data = data[:, None]
    T = data.shape[0]
    if T < 4:
        raise SignalTooShort(f"rfft_amplitude needs T >= 4, got {T}")
    spec = np.abs(np.fft.rfft(data.astype(np.float64), axis=0))
    return Tensor(spec[1:T // 2 + 1].mean(axis=1))


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state):
    """One bias-corrected Adam update, applied in place to ``params``.

    ``params`` are arrays or Tensors; ``grads`` are arrays (None = zero).
    Returns ``state`` with moments and step counter advanced.
    """
    arrays = [p.data if isinstance(p, Tensor) else p for p in params]
    if not state.m:
        state.m = [np.zeros_like(a) for a in arrays]
        state.v = [np.zeros_like(a) for a in arrays]
    if len(grads) != len(arrays) or len(state.m) != len(arrays):
        raise ShapeMismatch("adam_step: params, grads and state differ in length")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(a)
        if g.shape != a.shape or m.shape != a.shape:
            raise ShapeMismatch(f"adam_step: gradient {g.shape} vs parameter {a.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        a -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(a.dtype)
    return state


class Adam:
    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state)


# ---------------------------------------------------------------------------
# named-tensor container


def pack_named(named):
    """Serialise {name: array} to (manifest, payload) with little-endian f32 data."""
    manifest, chunks, offset = [], [], 0
    for name, arr in named.items():
        buf = np.ascontiguousarray(np.asarray(arr), dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(np.shape(arr)), "dtype": "f32", "offset": offset})
        chunks.append(buf)
        offset += len(buf)
    return manifest, b"".join(chunks)


def unpack_named(manifest, payload):
    named = {}
    for entry in manifest:
        if entry.get("dtype") != "f32":
            raise CorruptPayload(f"unsupported dtype {entry.get('dtype')!r} for {entry.get('name')!r}")
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * 4
        start = entry["offset"]
        if start < 0 or start + n > len(payload):
            raise CorruptPayload(f"tensor {entry['name']!r} runs past the payload")
        named[entry["name"]] = np.frombuffer(payload, dtype="<f4", count=n // 4, offset=start).reshape(shape).astype(np.float32)
    return named


def manifest_bytes(manifest):
    return json.dumps(manifest, separators=(",", ":")).encode()

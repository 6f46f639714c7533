"""Minimal reverse-mode differentiation on numpy arrays, plus Adam.

The engine is a per-forward tape: each op records its parents and a
backward closure, ``backward`` toposorts from the loss and accumulates
gradients into every reachable tensor that requires them. Feature maps
use the [channels, time] layout throughout. Double precision everywhere;
broadcasting is limited to scalars against arrays (all the model needs).
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, TrainingError

_grad_enabled = True


@contextmanager
def no_grad():
    """Skip tape recording inside the block (inference/benchmark paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        if _grad_enabled:
            self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
            self._parents = parents if self.requires_grad else ()
            self._backward = backward if self.requires_grad else None
        else:
            self.requires_grad = False
            self._parents = ()
            self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def _accum(self, grad):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _broadcast_pair(a: Tensor, b: Tensor):
    """Only scalar-vs-array broadcasting is supported."""
    if a.shape == b.shape or a.data.size == 1 or b.data.size == 1:
        return
    raise DomainError(f"shape mismatch {a.shape} vs {b.shape} (only scalar broadcast)")


def _reduce_like(grad, ref: Tensor):
    if grad.shape == ref.data.shape:
        return grad
    return np.sum(grad).reshape(ref.data.shape)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_pair(a, b)
    out = Tensor(a.data + b.data, parents=(a, b))

    def bwd(grad):
        a._accum(_reduce_like(grad, a))
        b._accum(_reduce_like(grad, b))

    out._backward = bwd if out.requires_grad else None
    return out


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_pair(a, b)
    out = Tensor(a.data - b.data, parents=(a, b))

    def bwd(grad):
        a._accum(_reduce_like(grad, a))
        b._accum(_reduce_like(-grad, b))

    out._backward = bwd if out.requires_grad else None
    return out


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_pair(a, b)
    out = Tensor(a.data * b.data, parents=(a, b))

    def bwd(grad):
        a._accum(_reduce_like(grad * b.data, a))
        b._accum(_reduce_like(grad * a.data, b))

    out._backward = bwd if out.requires_grad else None
    return out


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_pair(a, b)
    out = Tensor(a.data / b.data, parents=(a, b))

    def bwd(grad):
        a._accum(_reduce_like(grad / b.data, a))
        b._accum(_reduce_like(-grad * a.data / (b.data**2), b))

    out._backward = bwd if out.requires_grad else None
    return out


def scale(a, c: float):
    a = as_tensor(a)
    out = Tensor(a.data * c, parents=(a,))

    def bwd(grad):
        a._accum(grad * c)

    out._backward = bwd if out.requires_grad else None
    return out


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), parents=tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(grad):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * grad.ndim
            sl[axis] = slice(lo, hi)
            t._accum(grad[tuple(sl)])

    out._backward = bwd if out.requires_grad else None
    return out


def relu(a):
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0), parents=(a,))

    def bwd(grad):
        a._accum(grad * (a.data > 0.0))

    out._backward = bwd if out.requires_grad else None
    return out


def prelu(a, alpha):
    """PReLU with a single learned slope for the negative part."""
    a, alpha = as_tensor(a), as_tensor(alpha)
    neg = np.minimum(a.data, 0.0)
    out = Tensor(np.maximum(a.data, 0.0) + float(alpha.data) * neg, parents=(a, alpha))

    def bwd(grad):
        slope = np.where(a.data > 0.0, 1.0, float(alpha.data))
        a._accum(grad * slope)
        alpha._accum(np.sum(grad * neg).reshape(alpha.data.shape))

    out._backward = bwd if out.requires_grad else None
    return out


def sigmoid(a):
    a = as_tensor(a)
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(y, parents=(a,))

    def bwd(grad):
        a._accum(grad * y * (1.0 - y))

    out._backward = bwd if out.requires_grad else None
    return out


def log(a):
    a = as_tensor(a)
    out = Tensor(np.log(a.data), parents=(a,))

    def bwd(grad):
        a._accum(grad / a.data)

    out._backward = bwd if out.requires_grad else None
    return out


def clip(a, lo: float, hi: float):
    """Clamp with straight-through gradient inside the active range."""
    a = as_tensor(a)
    out = Tensor(np.clip(a.data, lo, hi), parents=(a,))

    def bwd(grad):
        a._accum(grad * ((a.data >= lo) & (a.data <= hi)))

    out._backward = bwd if out.requires_grad else None
    return out


def tsum(a):
    a = as_tensor(a)
    out = Tensor(np.sum(a.data), parents=(a,))

    def bwd(grad):
        a._accum(np.broadcast_to(grad, a.data.shape).copy() if np.ndim(grad) else np.full_like(a.data, float(grad)))

    out._backward = bwd if out.requires_grad else None
    return out


def tmean(a):
    a = as_tensor(a)
    n = a.data.size
    out = Tensor(np.mean(a.data), parents=(a,))

    def bwd(grad):
        a._accum(np.full_like(a.data, float(grad) / n))

    out._backward = bwd if out.requires_grad else None
    return out


def dot(a, b):
    """Inner product of two same-shape tensors; returns a scalar tensor."""
    return tsum(mul(a, b))


def affine(x, w, b):
    """Fully connected map: w @ x + b. x is [D_in] or [D_in, T]."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    y = w.data @ x.data
    y = y + (b.data if x.data.ndim == 1 else b.data[:, None])
    out = Tensor(y, parents=(x, w, b))

    def bwd(grad):
        x._accum(w.data.T @ grad)
        if x.data.ndim == 1:
            w._accum(np.outer(grad, x.data))
            b._accum(grad)
        else:
            w._accum(grad @ x.data.T)
            b._accum(grad.sum(axis=1))

    out._backward = bwd if out.requires_grad else None
    return out


def _conv_cols(x_pad, kernel, stride, dilation, t_out):
    idx = (np.arange(kernel) * dilation)[:, None] + (np.arange(t_out) * stride)[None, :]
    return x_pad[:, idx]  # [C, K, T_out]


def conv1d(x, w, bias=None, stride=1, dilation=1, groups=1, pad=0):
    """1-D convolution. x: [C_in, T], w: [C_out, C_in/groups, K].

    Covers the standard, 1x1 and depthwise-dilated cases the model needs.
    """
    x, w = as_tensor(x), as_tensor(w)
    c_in, t = x.shape
    c_out, c_in_g, kernel = w.shape
    if c_in_g * groups != c_in or c_out % groups != 0:
        raise DomainError(f"conv1d group mismatch: x {x.shape}, w {w.shape}, groups {groups}")
    span = (kernel - 1) * dilation + 1
    if t + 2 * pad < span:
        raise DomainError(f"input of length {t} too short for kernel span {span}")
    x_pad = np.pad(x.data, ((0, 0), (pad, pad))) if pad else x.data
    t_out = (t + 2 * pad - span) // stride + 1

    if kernel == 1 and stride == 1 and dilation == 1 and groups == 1:
        # fast path for the ubiquitous 1x1 conv
        y = w.data[:, :, 0] @ x_pad
        cols = None
    else:
        cols = _conv_cols(x_pad, kernel, stride, dilation, t_out)
        if groups == 1:
            y = w.data.reshape(c_out, -1) @ cols.reshape(c_in * kernel, t_out)
        elif groups == c_in and c_out == c_in:
            y = np.einsum("ckt,ck->ct", cols, w.data[:, 0, :])
        else:
            y = np.empty((c_out, t_out))
            og, ig = c_out // groups, c_in // groups
            for g in range(groups):
                y[g * og:(g + 1) * og] = w.data[g * og:(g + 1) * og].reshape(og, -1) @ \
                    cols[g * ig:(g + 1) * ig].reshape(ig * kernel, t_out)

    parents = (x, w)
    if bias is not None:
        bias = as_tensor(bias)
        y = y + bias.data[:, None]
        parents = (x, w, bias)
    out = Tensor(y, parents=parents)

    def bwd(grad):
        nonlocal cols
        if cols is None and (kernel > 1 or stride > 1 or dilation > 1 or groups > 1):
            cols = _conv_cols(x_pad, kernel, stride, dilation, t_out)
        if kernel == 1 and stride == 1 and dilation == 1 and groups == 1:
            w._accum((grad @ x_pad.T)[:, :, None])
            gx_pad = w.data[:, :, 0].T @ grad
        else:
            og, ig = c_out // groups, c_in // groups
            grad_w = np.empty_like(w.data)
            grad_cols = np.empty_like(cols)
            for g in range(groups):
                gy = grad[g * og:(g + 1) * og]
                c_blk = cols[g * ig:(g + 1) * ig].reshape(ig * kernel, t_out)
                grad_w[g * og:(g + 1) * og] = (gy @ c_blk.T).reshape(og, ig, kernel)
                gw_blk = w.data[g * og:(g + 1) * og].reshape(og, ig * kernel)
                grad_cols[g * ig:(g + 1) * ig] = (gw_blk.T @ gy).reshape(ig, kernel, t_out)
            w._accum(grad_w)
            gx_pad = np.zeros_like(x_pad)
            for k in range(kernel):
                off = k * dilation
                gx_pad[:, off:off + stride * t_out:stride] += grad_cols[:, k, :]
        if bias is not None:
            bias._accum(grad.sum(axis=1))
        x._accum(gx_pad[:, pad:pad + t] if pad else gx_pad)

    out._backward = bwd if out.requires_grad else None
    return out


def conv_transpose1d(x, w, stride=1):
    """Transposed 1-D convolution (decoder). x: [C_in, T'], w: [C_in, C_out, K].

    Output length is (T' - 1) * stride + K.
    """
    x, w = as_tensor(x), as_tensor(w)
    c_in, t_in = x.shape
    c_in_w, c_out, kernel = w.shape
    if c_in_w != c_in:
        raise DomainError(f"conv_transpose1d channel mismatch: x {x.shape}, w {w.shape}")
    t_out = (t_in - 1) * stride + kernel
    y = np.zeros((c_out, t_out))
    for k in range(kernel):
        y[:, k:k + stride * t_in:stride] += w.data[:, :, k].T @ x.data
    out = Tensor(y, parents=(x, w))

    def bwd(grad):
        gx = np.zeros_like(x.data)
        gw = np.empty_like(w.data)
        for k in range(kernel):
            g_k = grad[:, k:k + stride * t_in:stride]
            gx += w.data[:, :, k] @ g_k
            gw[:, :, k] = x.data @ g_k.T
        x._accum(gx)
        w._accum(gw)

    out._backward = bwd if out.requires_grad else None
    return out


def global_layer_norm(x, gain, bias, eps=1e-8):
    """Layer norm over all (channel, time) elements with per-channel affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.data.ndim != 2:
        raise DomainError("global_layer_norm expects a [C, T] input")
    mu = x.data.mean()
    var = x.data.var()
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = Tensor(gain.data[:, None] * xhat + bias.data[:, None], parents=(x, gain, bias))

    def bwd(grad):
        gain._accum((grad * xhat).sum(axis=1))
        bias._accum(grad.sum(axis=1))
        dxhat = grad * gain.data[:, None]
        x._accum(inv_std * (dxhat - dxhat.mean() - xhat * (dxhat * xhat).mean()))

    out._backward = bwd if out.requires_grad else None
    return out


def tile_time(a, t: int):
    """Repeat a vector [C] across time into a [C, t] map."""
    a = as_tensor(a)
    if a.data.ndim != 1:
        raise DomainError("tile_time expects a 1-D input")
    out = Tensor(np.repeat(a.data[:, None], t, axis=1), parents=(a,))

    def bwd(grad):
        a._accum(grad.sum(axis=1))

    out._backward = bwd if out.requires_grad else None
    return out


def slice_time(a, lo: int, hi: int):
    """Slice the last axis to [lo, hi)."""
    a = as_tensor(a)
    out = Tensor(a.data[..., lo:hi], parents=(a,))

    def bwd(grad):
        full = np.zeros_like(a.data)
        full[..., lo:hi] = grad
        a._accum(full)

    out._backward = bwd if out.requires_grad else None
    return out


def reshape(a, shape):
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape), parents=(a,))

    def bwd(grad):
        a._accum(grad.reshape(a.data.shape))

    out._backward = bwd if out.requires_grad else None
    return out


def backward(loss: Tensor):
    """Populate grads of every requires-grad tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise DomainError(f"backward requires a scalar loss, got shape {loss.shape}")
    topo, visited = [], set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad.reshape(node.data.shape))
        node._parents = ()  # free the tape
        node._backward = None


@dataclass
class AdamState:
    """Adam optimizer state; one pair of moment arrays per parameter name."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, state: AdamState):
    """Standard bias-corrected Adam update, in place on param tensors."""
    if state.lr <= 0:
        raise DomainError("learning rate must be positive")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g**2
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def zero_grads(params: dict):
    for p in params.values():
        p.grad = None


_CKPT_MAGIC = "SPARSESEP-CKPT v1"


def save_arrays(path, arrays: dict):
    """Write named arrays: plain-text header, then concatenated raw data.

    Header lines are 'name dtype dim0,dim1,... offset' with offsets into
    the little-endian data block that follows the 'DATA' line. Round-trip
    is bit-exact.
    """
    entries = []
    offset = 0
    for name, arr in sorted(arrays.items()):
        if " " in name or "\n" in name:
            raise DomainError(f"array name {name!r} may not contain whitespace")
        data = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        if data.ndim:  # ascontiguousarray would promote 0-d scalars to 1-d
            data = np.ascontiguousarray(data)
        if data.dtype.byteorder == ">":
            data = data.astype(data.dtype.newbyteorder("<"))
        dims = ",".join(str(d) for d in data.shape) if data.ndim else "scalar"
        entries.append((name, data, dims, offset))
        offset += data.nbytes
    with open(path, "wb") as fh:
        header = [_CKPT_MAGIC]
        header += [f"{name} {data.dtype.str.lstrip('<=|')} {dims} {off}"
                   for name, data, dims, off in entries]
        header.append("DATA")
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        for _, data, _, _ in entries:
            fh.write(data.tobytes())


def load_arrays(path) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    end = blob.index(b"DATA\n")
    lines = blob[:end].decode("ascii").splitlines()
    if not lines or lines[0] != _CKPT_MAGIC:
        raise DomainError(f"{path}: not a checkpoint file")
    data_start = end + len(b"DATA\n")
    arrays = {}
    for line in lines[1:]:
        name, dtype_str, dims, off = line.split(" ")
        shape = () if dims == "scalar" else tuple(int(d) for d in dims.split(","))
        dtype = np.dtype("<" + dtype_str)
        count = int(np.prod(shape)) if shape else 1
        start = data_start + int(off)
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=start).reshape(shape)
        arrays[name] = arr.copy()
    return arrays


def grad_check(f, inputs, h=1e-5, tol=1e-4):
    """Compare analytic gradients of scalar ``f(inputs)`` to central differences.

    ``inputs`` is a list of numpy arrays; every coordinate of every input is
    probed. Returns a dict report with the max relative error and any
    failing coordinates. Relative error uses a 1e-6 denominator floor so
    that exact-zero gradients compare cleanly.
    """
    if not 1e-7 <= h <= 1e-3:
        raise DomainError(f"step size h={h} outside [1e-7, 1e-3]")
    tensors = [Tensor(np.asarray(x, dtype=np.float64).copy(), requires_grad=True) for x in inputs]
    out = f(*tensors)
    backward(out)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    failures = []
    max_rel = 0.0
    for i, t in enumerate(tensors):
        flat = t.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            with no_grad():
                f_plus = float(f(*tensors).data)
            flat[j] = orig - h
            with no_grad():
                f_minus = float(f(*tensors).data)
            flat[j] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                failures.append({"input": i, "coord": j, "reason": "non-finite f at probe"})
                continue
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = analytic[i].reshape(-1)[j]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            max_rel = max(max_rel, rel)
            if rel > tol:
                failures.append({"input": i, "coord": j, "analytic": a,
                                 "numeric": numeric, "rel_err": rel})
    return {"passed": not failures, "max_rel_err": max_rel, "failures": failures}

"""Minimal reverse-mode automatic differentiation on numpy arrays.

Provides exactly the operations the byte classifier needs. Tensors carry a
numpy array (float32 for training, float64 for gradient checking; the dtype
of the leaves decides) and ops record themselves on the active GradTape.
A tape is single-owner: do not share one across threads.
"""

from __future__ import annotations

import math
import threading

import numpy as np
from scipy.special import erf

from .errors import NumericError, SequenceTooShortError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_tls = threading.local()


def _active_tape():
    return getattr(_tls, "tape", None)


class Tensor:
    """An n-d float array, optionally participating in the gradient graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "op")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self.op = None  # name of the op that produced this tensor, None for leaves

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{tag})"


class GradTape:
    """Ordered record of executed ops; replayed in reverse for gradients.

    Use as a context manager around the forward pass, then call
    ``tape.backward(loss)``. Accumulates into ``.grad`` of every recorded
    tensor with ``requires_grad=True``.
    """

    def __init__(self, check_finite=False):
        self._entries = []  # (op name, inputs, output, backward fn, needs)
        self.check_finite = check_finite

    def __enter__(self):
        if _active_tape() is not None:
            raise RuntimeError("a GradTape is already active on this thread")
        _tls.tape = self
        return self

    def __exit__(self, *exc):
        _tls.tape = None
        return False

    def record(self, name, inputs, output, backward):
        output.op = name
        needs = tuple(t.requires_grad or t.op is not None for t in inputs)
        self._entries.append((name, inputs, output, backward, needs))

    def backward(self, loss):
        """Seed d(loss)=1 and propagate through the tape in reverse."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        for name, inputs, output, backward, needs in reversed(self._entries):
            g = grads.pop(id(output), None)
            if g is None:
                continue
            in_grads = backward(g, needs)
            for t, ig, needed in zip(inputs, in_grads, needs):
                if not needed or ig is None:
                    continue
                if self.check_finite and not np.all(np.isfinite(ig)):
                    raise NumericError(f"non-finite gradient produced by op '{name}'")
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        # Leaf grads are fully accumulated once the walk finishes; write them out.
        seen = set()
        for _, inputs, _, _, _ in self._entries:
            for t in inputs:
                if t.requires_grad and id(t) in grads and id(t) not in seen:
                    seen.add(id(t))
                    g = grads[id(t)]
                    t.grad = g if t.grad is None else t.grad + g


def _record(name, inputs, output, backward):
    tape = _active_tape()
    if tape is not None:
        tape.record(name, inputs, output, backward)
    return output


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g, needs):
        da = db = None
        if needs[0]:
            da = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape)
        if needs[1]:
            db = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape)
        return da, db

    return _record("matmul", (a, b), out, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def backward(g, needs):
        return (
            _unbroadcast(g, a.data.shape) if needs[0] else None,
            _unbroadcast(g, b.data.shape) if needs[1] else None,
        )

    return _record("add", (a, b), out, backward)


def add_const(a: Tensor, c) -> Tensor:
    """Add a non-differentiable constant array (attention masks etc.)."""
    out = Tensor(a.data + c)

    def backward(g, needs):
        return (_unbroadcast(g, a.data.shape),)

    return _record("add_const", (a,), out, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def backward(g, needs):
        return (
            _unbroadcast(g * b.data, a.data.shape) if needs[0] else None,
            _unbroadcast(g * a.data, b.data.shape) if needs[1] else None,
        )

    return _record("mul", (a, b), out, backward)


def mul_const(a: Tensor, c) -> Tensor:
    """Multiply by a non-differentiable constant (scalar or array)."""
    out = Tensor(a.data * c)

    def backward(g, needs):
        return (_unbroadcast(g * c, a.data.shape),)

    return _record("mul_const", (a,), out, backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x[..., k] @ w[k, n] + b[n]."""
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(f"linear dimensions disagree: {x.data.shape} x {w.data.shape}")
    y = x.data @ w.data
    if b is not None:
        y = y + b.data
    out = Tensor(y)
    inputs = (x, w) if b is None else (x, w, b)

    def backward(g, needs):
        dx = dw = db = None
        if needs[0]:
            dx = g @ w.data.T
        if needs[1]:
            g2 = g.reshape(-1, g.shape[-1])
            x2 = x.data.reshape(-1, x.data.shape[-1])
            dw = x2.T @ g2
        if b is not None and needs[2]:
            db = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return (dx, dw) if b is None else (dx, dw, db)

    return _record("linear", inputs, out, backward)


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GELU."""
    e = erf(x.data * _INV_SQRT2)
    out = Tensor(0.5 * x.data * (1.0 + e))

    def backward(g, needs):
        d = 0.5 * (1.0 + e) + x.data * np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * d,)

    return _record("gelu", (x,), out, backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax tolerating -inf logits; fully masked rows yield zeros."""
    m = np.max(x.data, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x.data - m_safe)
    s = e.sum(axis=axis, keepdims=True)
    y = e / np.where(s == 0.0, 1.0, s)
    out = Tensor(y)

    def backward(g, needs):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    return _record("softmax", (x,), out, backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gamma.data.shape}/{beta.data.shape} "
                         f"do not match feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def backward(g, needs):
        dx = dgamma = dbeta = None
        lead = tuple(range(g.ndim - 1))
        if needs[1]:
            dgamma = (g * xhat).sum(axis=lead)
        if needs[2]:
            dbeta = g.sum(axis=lead)
        if needs[0]:
            dxhat = g * gamma.data
            dx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return dx, dgamma, dbeta

    return _record("layer_norm", (x, gamma, beta), out, backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log softmax probability of the true class.

    labels: integer array [B]; stabilized by max subtraction.
    """
    labels = np.asarray(labels)
    B, C = logits.data.shape
    if labels.shape != (B,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {B}")
    if labels.min() < 0 or labels.max() >= C:
        raise IndexError(f"label out of range [0, {C}): {labels.min()}..{labels.max()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    out = Tensor(-logp[np.arange(B), labels].mean())

    def backward(g, needs):
        p = np.exp(logp)
        p[np.arange(B), labels] -= 1.0
        return (g * p / B,)

    return _record("softmax_cross_entropy", (logits,), out, backward)


# ---------------------------------------------------------------------------
# gather / shape ops
# ---------------------------------------------------------------------------

def embedding_gather(table: Tensor, ids) -> Tensor:
    """Row-gather table[ids]; gradient scatter-adds into the table."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(f"token id out of range [0, {table.data.shape[0]}): "
                         f"{ids.min()}..{ids.max()}")
    out = Tensor(table.data[ids])

    def backward(g, needs):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids, g)
        return (dt,)

    return _record("embedding_gather", (table,), out, backward)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def backward(g, needs):
        return (g.reshape(x.data.shape),)

    return _record("reshape", (x,), out, backward)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor(x.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def backward(g, needs):
        return (g.transpose(inv),)

    return _record("transpose", (x,), out, backward)


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    out = Tensor(x.data.swapaxes(a1, a2))

    def backward(g, needs):
        return (g.swapaxes(a1, a2),)

    return _record("swapaxes", (x,), out, backward)


def index_axis(x: Tensor, axis: int, i: int) -> Tensor:
    """Take index i along axis (the axis is dropped)."""
    out = Tensor(np.take(x.data, i, axis=axis))

    def backward(g, needs):
        dx = np.zeros_like(x.data)
        sl = [slice(None)] * x.data.ndim
        sl[axis] = i
        dx[tuple(sl)] = g
        return (dx,)

    return _record("index_axis", (x,), out, backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out = Tensor(x.data[sl].copy())

    def backward(g, needs):
        dx = np.zeros_like(x.data)
        dx[sl] = g
        return (dx,)

    return _record("slice_axis", (x,), out, backward)


def pad_axis(x: Tensor, axis: int, before: int, after: int) -> Tensor:
    """Zero-pad along one axis."""
    pad = [(0, 0)] * x.data.ndim
    pad[axis] = (before, after)
    out = Tensor(np.pad(x.data, pad))
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(before, before + x.data.shape[axis])
    sl = tuple(sl)

    def backward(g, needs):
        return (g[sl],)

    return _record("pad_axis", (x,), out, backward)


def roll_axis(x: Tensor, shift: int, axis: int) -> Tensor:
    """Cyclic shift along an axis."""
    out = Tensor(np.roll(x.data, shift, axis=axis))

    def backward(g, needs):
        return (np.roll(g, -shift, axis=axis),)

    return _record("roll_axis", (x,), out, backward)


def concat_pairs(x: Tensor) -> Tensor:
    """[B, L, d] with even L -> [B, L//2, 2d]: adjacent tokens concatenated.

    Row-major layout makes this a pure reshape.
    """
    B, L, d = x.data.shape
    if L % 2 != 0:
        raise ShapeError(f"concat_pairs needs an even sequence length, got {L}")
    return reshape(x, (B, L // 2, 2 * d))


def mean_over_axis(x: Tensor, axis: int) -> Tensor:
    """Mean along one axis; backward spreads the gradient uniformly."""
    out = Tensor(x.data.mean(axis=axis))
    n = x.data.shape[axis]

    def backward(g, needs):
        return (np.repeat(np.expand_dims(g / n, axis), n, axis=axis),)

    return _record("mean_over_axis", (x,), out, backward)


def sum_over_axis(x: Tensor, axis: int) -> Tensor:
    out = Tensor(x.data.sum(axis=axis))
    n = x.data.shape[axis]

    def backward(g, needs):
        return (np.repeat(np.expand_dims(g, axis), n, axis=axis),)

    return _record("sum_over_axis", (x,), out, backward)


# ---------------------------------------------------------------------------
# sequence reduction
# ---------------------------------------------------------------------------

def conv1d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int) -> Tensor:
    """Valid (no padding) 1-d convolution over the sequence axis.

    x: [B, L, d_in], kernel: [k, d_in, d_out], bias: [d_out].
    Output length L' = floor((L - k) / stride) + 1.
    """
    B, L, d_in = x.data.shape
    k, kd_in, d_out = kernel.data.shape
    if kd_in != d_in:
        raise ShapeError(f"conv1d channel mismatch: input {d_in}, kernel {kd_in}")
    if stride < 1:
        raise ShapeError(f"conv1d stride must be >= 1, got {stride}")
    if L < k:
        raise SequenceTooShortError(L, k)
    Lp = (L - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, k, axis=1)[:, ::stride]
    out = Tensor(np.einsum("bldk,kdo->blo", win, kernel.data) + bias.data)

    def backward(g, needs):
        dx = dk = db = None
        if needs[1]:
            dk = np.einsum("bldk,blo->kdo", win, g)
        if needs[2]:
            db = g.sum(axis=(0, 1))
        if needs[0]:
            dx = np.zeros_like(x.data)
            span = (Lp - 1) * stride + 1
            for t in range(k):
                dx[:, t:t + span:stride, :] += g @ kernel.data[t].T
        return dx, dk, db

    return _record("conv1d", (x, kernel, bias), out, backward)


def windowed_mean(x: Tensor, k: int, stride: int) -> Tensor:
    """Mean over sliding windows of size k; same length arithmetic as conv1d."""
    B, L, d = x.data.shape
    if L < k:
        raise SequenceTooShortError(L, k)
    Lp = (L - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, k, axis=1)[:, ::stride]
    out = Tensor(win.mean(axis=-1))

    def backward(g, needs):
        dx = np.zeros_like(x.data)
        span = (Lp - 1) * stride + 1
        gk = g / k
        for t in range(k):
            dx[:, t:t + span:stride, :] += gk
        return (dx,)

    return _record("windowed_mean", (x,), out, backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

class GradcheckReport:
    """Per-tensor max relative error between analytic and numeric gradients."""

    def __init__(self):
        self.per_tensor = {}

    @property
    def max_rel_error(self):
        return max(self.per_tensor.values()) if self.per_tensor else 0.0

    def ok(self, tol=1e-4):
        return self.max_rel_error < tol

    def __repr__(self):
        worst = self.max_rel_error
        return f"GradcheckReport(tensors={len(self.per_tensor)}, max_rel_error={worst:.3e})"


def gradcheck(loss_fn, params, n_coords=8, h=1e-5, rng=None) -> GradcheckReport:
    """Compare analytic gradients against central finite differences.

    loss_fn: nullary callable returning a scalar Tensor built from `params`.
    params: dict name -> Tensor, all float64 with requires_grad=True.
    Samples up to n_coords coordinates per tensor.
    """
    rng = rng or np.random.default_rng(0)
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise ValueError(f"gradcheck requires float64 parameters ('{name}' is {p.data.dtype})")

    for p in params.values():
        p.zero_grad()
    with GradTape(check_finite=True) as tape:
        loss = loss_fn()
    tape.backward(loss)

    report = GradcheckReport()
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        n = flat.size
        coords = rng.choice(n, size=min(n_coords, n), replace=False)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            f_plus = loss_fn().item()
            flat[c] = orig - h
            f_minus = loss_fn().item()
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = analytic.reshape(-1)[c]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, rel)
        report.per_tensor[name] = worst
    return report

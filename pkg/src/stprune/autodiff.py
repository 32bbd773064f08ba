"""Dense tensors with reverse-mode differentiation, losses and SGD.

Everything is float64 numpy under the hood. Operations optionally record
onto a Tape; Tape.backward replays the recorded closures in reverse order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class Tensor:
    """Dense value carrier. Gradients accumulate into .grad during backward."""

    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad=False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.values.shape

    def detach(self):
        return Tensor(self.values, requires_grad=False)

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Records backward closures in execution order; single-use."""

    def __init__(self):
        self._records = []
        self._used = False

    def record(self, fn):
        self._records.append(fn)

    def backward(self, loss: Tensor):
        if self._used:
            raise RuntimeError("tape already consumed")
        self._used = True
        if loss.values.shape != ():
            raise ValueError("backward requires a scalar loss")
        loss.grad = np.ones_like(loss.values)
        for fn in reversed(self._records):
            fn()


def _want_grad(*tensors):
    return any(t is not None and t.requires_grad for t in tensors)


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor, tape=None) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.values + b.values, _want_grad(a, b))
    if tape is not None and out.requires_grad:
        def bwd():
            if a.requires_grad:
                a.accumulate(out.grad)
            if b.requires_grad:
                b.accumulate(out.grad)
        tape.record(bwd)
    return out


def mul(a: Tensor, b: Tensor, tape=None) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.values * b.values, _want_grad(a, b))
    if tape is not None and out.requires_grad:
        av, bv = a.values.copy(), b.values.copy()
        def bwd():
            if a.requires_grad:
                a.accumulate(out.grad * bv)
            if b.requires_grad:
                b.accumulate(out.grad * av)
        tape.record(bwd)
    return out


def scale(a: Tensor, c: float, tape=None) -> Tensor:
    out = Tensor(a.values * c, a.requires_grad)
    if tape is not None and out.requires_grad:
        def bwd():
            a.accumulate(out.grad * c)
        tape.record(bwd)
    return out


def relu(x: Tensor, tape=None) -> Tensor:
    out = Tensor(np.maximum(x.values, 0.0), x.requires_grad)
    if tape is not None and out.requires_grad:
        pos = x.values > 0
        def bwd():
            x.accumulate(out.grad * pos)
        tape.record(bwd)
    return out


def sigmoid(x: Tensor, tape=None) -> Tensor:
    s = _sig(x.values)
    out = Tensor(s, x.requires_grad)
    if tape is not None and out.requires_grad:
        def bwd():
            x.accumulate(out.grad * s * (1.0 - s))
        tape.record(bwd)
    return out


def _sig(v):
    # stable logistic
    out = np.empty_like(v, dtype=np.float64)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def matmul(a: Tensor, b: Tensor, tape=None) -> Tensor:
    out = Tensor(a.values @ b.values, _want_grad(a, b))
    if tape is not None and out.requires_grad:
        av, bv = a.values.copy(), b.values.copy()
        def bwd():
            if a.requires_grad:
                a.accumulate(out.grad @ bv.T)
            if b.requires_grad:
                b.accumulate(av.T @ out.grad)
        tape.record(bwd)
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None, tape=None) -> Tensor:
    """x: [B, Cin], w: [Cout, Cin], b: [Cout] or None."""
    if x.shape[-1] != w.shape[1]:
        raise ValueError(f"linear shape mismatch: x {x.shape} vs w {w.shape}")
    y = x.values @ w.values.T
    if b is not None:
        y = y + b.values
    out = Tensor(y, _want_grad(x, w, b))
    if tape is not None and out.requires_grad:
        xv, wv = x.values.copy(), w.values.copy()
        def bwd():
            if x.requires_grad:
                x.accumulate(out.grad @ wv)
            if w.requires_grad:
                w.accumulate(out.grad.T @ xv)
            if b is not None and b.requires_grad:
                b.accumulate(out.grad.sum(axis=0))
        tape.record(bwd)
    return out


def _im2col(x, kh, kw, stride, pad):
    B, C, H, W = x.shape
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    s = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(B, C, Ho, Wo, kh, kw),
        strides=(s[0], s[1], s[2] * stride, s[3] * stride, s[2], s[3]),
        writeable=False,
    )
    # [B, Ho, Wo, C*kh*kw]
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(B, Ho, Wo, C * kh * kw), Ho, Wo


def _col2im(cols, x_shape, kh, kw, stride, pad):
    B, C, H, W = x_shape
    Hp, Wp = H + 2 * pad, W + 2 * pad
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, C, Hp, Wp))
    cols = cols.reshape(B, Ho, Wo, C, kh, kw)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride=1, pad=0, tape=None) -> Tensor:
    """x: [B, C, H, W], w: [O, C, kh, kw], b: [O] or None."""
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d channel mismatch: x {x.shape} vs w {w.shape}")
    B = x.shape[0]
    O, C, kh, kw = w.shape
    cols, Ho, Wo = _im2col(x.values, kh, kw, stride, pad)
    flat = cols.reshape(-1, C * kh * kw)
    y = flat @ w.values.reshape(O, -1).T
    if b is not None:
        y = y + b.values
    y = y.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    out = Tensor(y, _want_grad(x, w, b))
    if tape is not None and out.requires_grad:
        wv = w.values.copy()
        flat_saved = flat.copy() if w.requires_grad else None
        def bwd():
            g = out.grad.transpose(0, 2, 3, 1).reshape(-1, O)
            if w.requires_grad:
                w.accumulate((g.T @ flat_saved).reshape(O, C, kh, kw))
            if b is not None and b.requires_grad:
                b.accumulate(g.sum(axis=0))
            if x.requires_grad:
                gcols = g @ wv.reshape(O, -1)
                x.accumulate(_col2im(gcols.reshape(B, Ho, Wo, -1),
                                     x.shape, kh, kw, stride, pad))
        tape.record(bwd)
    return out


def avgpool2d(x: Tensor, kernel, stride, pad=0, tape=None) -> Tensor:
    """Average pooling, zero padding counted in the divisor."""
    B, C, H, W = x.shape
    cols, Ho, Wo = _im2col(
        x.values.reshape(B * C, 1, H, W), kernel, kernel, stride, pad)
    y = cols.mean(axis=3).reshape(B, C, Ho, Wo)
    out = Tensor(y, x.requires_grad)
    if tape is not None and out.requires_grad:
        def bwd():
            g = out.grad.reshape(B * C, Ho, Wo, 1)
            gcols = np.broadcast_to(g / (kernel * kernel),
                                    (B * C, Ho, Wo, kernel * kernel))
            x.accumulate(_col2im(gcols, (B * C, 1, H, W),
                                 kernel, kernel, stride, pad).reshape(B, C, H, W))
        tape.record(bwd)
    return out


def global_pool(x: Tensor, tape=None) -> Tensor:
    """Mean over spatial dims: [B, C, H, W] -> [B, C]."""
    B, C, H, W = x.shape
    out = Tensor(x.values.mean(axis=(2, 3)), x.requires_grad)
    if tape is not None and out.requires_grad:
        def bwd():
            x.accumulate(np.broadcast_to(
                out.grad[:, :, None, None] / (H * W), x.shape).copy())
        tape.record(bwd)
    return out


def flatten(x: Tensor, tape=None) -> Tensor:
    B = x.shape[0]
    shape = x.shape
    out = Tensor(x.values.reshape(B, -1), x.requires_grad)
    if tape is not None and out.requires_grad:
        def bwd():
            x.accumulate(out.grad.reshape(shape))
        tape.record(bwd)
    return out


def concat(xs, tape=None) -> Tensor:
    """Concatenate along the channel axis (axis 1)."""
    out = Tensor(np.concatenate([x.values for x in xs], axis=1),
                 _want_grad(*xs))
    if tape is not None and out.requires_grad:
        sizes = [x.shape[1] for x in xs]
        def bwd():
            off = 0
            for x, n in zip(xs, sizes):
                if x.requires_grad:
                    x.accumulate(out.grad[:, off:off + n])
                off += n
        tape.record(bwd)
    return out


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _log_softmax(z):
    m = z.max(axis=1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, labels, tape=None) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    B, K = logits.shape
    if labels.shape != (B,):
        raise ValueError("labels must have one entry per row")
    if labels.min() < 0 or labels.max() >= K:
        raise ValueError("label out of range")
    ls = _log_softmax(logits.values)
    out = Tensor(-ls[np.arange(B), labels].mean(), logits.requires_grad)
    if tape is not None and out.requires_grad:
        p = np.exp(ls)
        def bwd():
            g = p.copy()
            g[np.arange(B), labels] -= 1.0
            logits.accumulate(out.grad * g / B)
        tape.record(bwd)
    return out


_NORM_EPS = 1e-12


def _normalized_probs_values(z):
    """Rows of exp(z_i/||z||) / sum_j exp(z_j/||z||); uniform rows at ~zero norm."""
    n = np.linalg.norm(z, axis=1, keepdims=True)
    small = n < _NORM_EPS
    safe_n = np.where(small, 1.0, n)
    u = z / safe_n
    u = np.where(small, 0.0, u)
    m = u.max(axis=1, keepdims=True)
    e = np.exp(u - m)
    return e / e.sum(axis=1, keepdims=True), n, small


def normalized_probs(logits: Tensor) -> Tensor:
    p, _, _ = _normalized_probs_values(logits.values)
    return Tensor(p)


def normalized_kl(teacher_logits: Tensor, student_logits: Tensor, tape=None) -> Tensor:
    """Mean KL between norm-scaled softmaxes; the teacher never gets gradient."""
    if teacher_logits.shape != student_logits.shape:
        raise ValueError("normalized_kl shape mismatch")
    B, K = student_logits.shape
    t, _, _ = _normalized_probs_values(teacher_logits.values)
    s, n, small = _normalized_probs_values(student_logits.values)
    kl = (t * (np.log(t + _NORM_EPS) - np.log(s + _NORM_EPS))).sum(axis=1)
    out = Tensor(kl.mean(), student_logits.requires_grad)
    if tape is not None and out.requires_grad:
        z = student_logits.values.copy()
        def bwd():
            # d/du of -sum t log softmax(u) is (softmax(u) - t); chain through
            # u = z / ||z||, whose Jacobian is I/n - z z^T / n^3.
            g = s - t
            safe_n = np.where(small, 1.0, n)
            gz = g / safe_n - z * ((z * g).sum(axis=1, keepdims=True) / safe_n ** 3)
            gz = np.where(small, 0.0, gz)
            student_logits.accumulate(out.grad * gz / B)
        tape.record(bwd)
    return out


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    """SGD with momentum and decoupled-from-nothing classic weight decay."""

    lr0: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


def sgd_step(params: dict, grads: dict, state: OptimState, lr: float):
    """v <- mu v + g + wd*theta; theta <- theta - lr v. Mutates params in place."""
    if lr < 0:
        raise ValueError("lr must be >= 0")
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        if g.shape != theta.shape:
            raise ValueError(f"grad shape mismatch for {name}")
        buf = state.buffers.get(name)
        if buf is None:
            buf = np.zeros_like(theta)
        buf = state.momentum * buf + g + state.weight_decay * theta
        state.buffers[name] = buf
        theta -= lr * buf


def cosine_lr(t: int, T: int, lr0: float) -> float:
    if not 0 <= t <= T:
        raise ValueError("t must lie in [0, T]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / T))

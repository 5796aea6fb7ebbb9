"""Dense float64 tensors with a recorded reverse-mode tape, Adam, and a gradient checker.

Usage::

    with Tape() as tape:
        y = ops.sum(ops.relu(ops.linear(x, W, b)))
    tape.backward(y)          # fills W.grad, b.grad, x.grad

Operations only record while a tape is active and at least one input requires
a gradient, so the same model code doubles as an inference path.
"""
from __future__ import annotations

import contextvars
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import scipy.sparse as sp

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "clix3d_active_tape", default=None)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=np.float64, copy=True) if not (
            isinstance(data, np.ndarray) and data.dtype == np.float64) else data
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, name={self.name!r})"

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def numpy(self):
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    # operator sugar for the common cases
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def parameter(data, name: str = "") -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64).copy(), requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64))


class Tape:
    """Ordered record of the operations of one forward pass."""

    def __init__(self):
        self.nodes: list = []
        self._token = None

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def record(self, out: Tensor, parents: tuple, backward: Callable):
        self.nodes.append((out, parents, backward))

    def backward(self, loss: Tensor, seed=None):
        if loss.grad is None:
            loss.grad = np.zeros_like(loss.data)
        loss.grad = loss.grad + (np.ones_like(loss.data) if seed is None else seed)
        for out, parents, fn in reversed(self.nodes):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for p, g in zip(parents, grads):
                if g is None or not p.requires_grad:
                    continue
                if p.grad is None:
                    p.grad = np.array(g, dtype=np.float64, copy=True).reshape(p.data.shape)
                else:
                    p.grad += g.reshape(p.data.shape) if isinstance(g, np.ndarray) else g
        self.nodes.clear()


def _emit(data, parents: tuple, backward: Callable) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, parents, backward)
    return out


def custom_op(data, parents: tuple, backward: Callable) -> Tensor:
    """Record an op whose backward (``g_out -> grads per parent``) is supplied by the caller."""
    return _emit(np.asarray(data, dtype=np.float64), tuple(parents), backward)


# --- elementwise & algebra --------------------------------------------------------

def _as_tensor(x):
    return x if isinstance(x, Tensor) else constant(x)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _emit(a.data + b.data, (a, b), lambda g: (g, g))
    if b.data.ndim == 1 and a.data.ndim == 2 and a.shape[1] == b.shape[0]:
        return _emit(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c) -> Tensor:
    """Multiply by a constant scalar or a constant array of the same shape."""
    c = np.asarray(c, dtype=np.float64)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _emit(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W + b`` for ``x (n, in)``, ``W (in, out)``, ``b (out,)``."""
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ValueError(f"linear: shape mismatch x{x.shape} W{W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise ValueError(f"linear: bias shape {b.shape} does not match W{W.shape}")
    xd, Wd = x.data, W.data
    out = xd @ Wd
    if b is None:
        return _emit(out, (x, W), lambda g: (g @ Wd.T, xd.T @ g))
    return _emit(out + b.data, (x, W, b), lambda g: (g @ Wd.T, xd.T @ g, g.sum(axis=0)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _emit(s, (x,), lambda g: (g * s * (1.0 - s),))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return _emit(e, (x,), lambda g: (g * e,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _emit(np.log(xd), (x,), lambda g: (g / xd,))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _emit(t, (x,), lambda g: (g * (1.0 - t * t),))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _emit(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, max(x.data.size, 1)
    return _emit(np.array(x.data.sum() / n), (x,), lambda g: (np.broadcast_to(g / n, shape),))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(xs: list, axis: int = 1) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _emit(np.concatenate([x.data for x in xs], axis=axis), tuple(xs),
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def gather_rows(x: Tensor, idx) -> Tensor:
    """Rows ``x[idx]``; negative indices produce zero rows."""
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    valid = idx >= 0
    safe = np.where(valid, idx, 0)
    out = x.data[safe] * valid[:, None]
    n = x.shape[0]

    def back(g):
        gx = np.zeros((n, g.shape[1]))
        np.add.at(gx, safe[valid], g[valid])
        return (gx,)
    return _emit(out, (x,), back)


def segment_max(x: Tensor, seg, n_seg: int) -> Tensor:
    """Per-channel max of the rows of ``x`` grouped by ``seg`` (every segment non-empty)."""
    seg = np.asarray(seg, dtype=np.int64)
    perm = np.argsort(seg, kind="stable")
    ss = seg[perm]
    xs = x.data[perm]
    starts = np.flatnonzero(np.r_[True, ss[1:] != ss[:-1]])
    if len(starts) != n_seg:
        raise ValueError("segment_max: every segment needs at least one row")
    out = np.maximum.reduceat(xs, starts, axis=0)

    def back(g):
        hit = xs == out[ss]
        cs = np.cumsum(hit, axis=0)
        base = np.where(starts[:, None] > 0, cs[np.maximum(starts - 1, 0)], 0)
        first = hit & ((cs - base[ss]) == 1)
        gx = np.zeros_like(x.data)
        gx[perm] = first * g[ss]
        return (gx,)
    return _emit(out, (x,), back)


def sparse_matmul(S, x: Tensor) -> Tensor:
    """``S @ x`` for a constant sparse matrix ``S``."""
    S = sp.csr_matrix(S)
    St = S.T.tocsr()
    return _emit(np.asarray(S @ x.data), (x,), lambda g: (np.asarray(St @ g),))


def conv2d(x: Tensor, W: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """3x3 convolution, zero padding 1, NHWC layout; ``W`` is ``(9 * Cin, Cout)``."""
    B, H, Wd, C = x.shape
    if W.shape[0] != 9 * C:
        raise ValueError(f"conv2d: weight {W.shape} incompatible with {C} input channels")
    Ho, Wo = (H - 1) // stride + 1, (Wd - 1) // stride + 1
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    taps = [(dy, dx) for dy in range(3) for dx in range(3)]
    cols = np.concatenate(
        [xp[:, dy:dy + stride * (Ho - 1) + 1:stride, dx:dx + stride * (Wo - 1) + 1:stride, :]
         for dy, dx in taps], axis=-1)
    flat = cols.reshape(-1, 9 * C)
    out = (flat @ W.data + b.data).reshape(B, Ho, Wo, -1)
    Wdat = W.data

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gW = flat.T @ g2
        gb = g2.sum(axis=0)
        gcols = (g2 @ Wdat.T).reshape(B, Ho, Wo, 9, C)
        gxp = np.zeros_like(xp)
        for k, (dy, dx) in enumerate(taps):
            gxp[:, dy:dy + stride * (Ho - 1) + 1:stride, dx:dx + stride * (Wo - 1) + 1:stride, :] += gcols[..., k, :]
        return (gxp[:, 1:-1, 1:-1, :], gW, gb)
    return _emit(out, (x, W, b), back)


# --- losses ------------------------------------------------------------------------

def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_with_logits(logits: Tensor, targets, weights) -> Tensor:
    """``sum(w * BCE(sigmoid(z), t))`` computed stably."""
    z = logits.data
    t = np.asarray(targets, dtype=np.float64).reshape(z.shape)
    w = np.asarray(weights, dtype=np.float64).reshape(z.shape)
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    s = _sigmoid(z)
    return _emit(np.array((w * loss).sum()), (logits,), lambda g: (g * w * (s - t),))


def smooth_l1(pred: Tensor, target, weights, beta: float = 1.0 / 9.0) -> Tensor:
    """Weighted sum of smooth-L1 between ``pred`` and a constant ``target``."""
    d = pred.data - np.asarray(target, dtype=np.float64).reshape(pred.shape)
    w = np.asarray(weights, dtype=np.float64)
    w = np.broadcast_to(w.reshape(w.shape + (1,) * (d.ndim - w.ndim)), d.shape)
    ad = np.abs(d)
    small = ad < beta
    val = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta)
    grad = np.where(small, d / beta, np.sign(d))
    return _emit(np.array((w * val).sum()), (pred,), lambda g: (g * w * grad,))


def cross_entropy(logits: Tensor, labels, weights) -> Tensor:
    """Weighted sum of softmax cross-entropy, ``logits (n, k)``, integer ``labels (n,)``."""
    z = logits.data
    lab = np.asarray(labels, dtype=np.int64)
    w = np.asarray(weights, dtype=np.float64)
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    rows = np.arange(len(z))
    loss = lse - z[rows, lab]
    p = np.exp(z - lse[:, None])

    def back(g):
        gz = p.copy()
        gz[rows, lab] -= 1.0
        return (g * w[:, None] * gz,)
    return _emit(np.array((w * loss).sum()), (logits,), back)


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# --- optimizer ---------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict | None, state: AdamState, lr: float | None = None) -> dict:
    """One Adam update with decoupled weight decay, in place on ``params``.

    ``grads`` maps names to arrays; ``None`` uses each parameter's ``.grad``
    (a missing grad counts as zero).
    """
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = (p.grad if grads is None else grads.get(name))
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ValueError(f"adam_step: grad shape {g.shape} != param {name} {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if state.weight_decay:
            p.data -= lr * state.weight_decay * p.data
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


def one_cycle_lr(step: int, base_lr: float, period: int, pct_start: float = 0.4,
                 div_factor: float = 10.0, final_div: float = 1e2) -> float:
    """Cyclic one-cycle schedule: cosine warm-up to ``base_lr`` then cosine decay.

    The cycle repeats every ``period`` steps.
    """
    period = max(int(period), 1)
    pos = (step % period) / period
    lo, hi, end = base_lr / div_factor, base_lr, base_lr / (div_factor * final_div)
    if pos < pct_start:
        f = pos / pct_start
        return hi + (lo - hi) * 0.5 * (1 + math.cos(math.pi * f))
    f = (pos - pct_start) / max(1.0 - pct_start, 1e-12)
    return end + (hi - end) * 0.5 * (1 + math.cos(math.pi * f))


# --- gradient checking -------------------------------------------------------------

def grad_check(f: Callable[..., Tensor], x, h: float = 1e-5, n_coords: int | None = None,
               seed: int = 0) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` takes no arguments and reads the tensor(s) ``x`` (a Tensor or a list
    of Tensors) that it closes over. The error per coordinate is
    ``|a - n| / max(1, |a|, |n|)``. ``n_coords`` limits the check to a seeded
    random subset of coordinates per tensor.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    flags = [t.requires_grad for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        y = f()
    if not np.all(np.isfinite(y.data)):
        raise ValueError("grad_check: f is not finite at x")
    tape.backward(y)
    rng = np.random.default_rng(seed)
    worst = 0.0
    try:
        for t in xs:
            analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if n_coords is not None and n_coords < flat.size:
                coords = np.sort(rng.choice(flat.size, size=n_coords, replace=False))
            for i in coords:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise ValueError("grad_check: f is not finite near x")
                num = (fp - fm) / (2 * h)
                a = analytic.reshape(-1)[i]
                worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    finally:
        for t, fl in zip(xs, flags):
            t.requires_grad = fl
    return worst


# --- checkpoints -------------------------------------------------------------------

CHECKPOINT_MAGIC = b"CLX3DCKP"
CHECKPOINT_VERSION = 1


def save_tensors(path, tensors: dict, meta: dict | None = None) -> None:
    """Write named tensors to a flat little-endian binary file with a versioned header."""
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<III", CHECKPOINT_VERSION, len(tensors), len(meta_bytes)),
             meta_bytes]
    for name in sorted(tensors):
        arr = tensors[name]
        arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_tensors(path) -> tuple[dict, dict]:
    """Read a file written by :func:`save_tensors`; returns ``(tensors, meta)``."""
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, count, mlen = struct.unpack_from("<III", buf, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 20
    meta = json.loads(buf[off:off + mlen].decode("utf-8"))
    off += mlen
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, off)
        off += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    return out, meta


def iter_params(params: dict) -> Iterable[Tensor]:
    return (params[k] for k in sorted(params))

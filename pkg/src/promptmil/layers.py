"""Differentiable layers, parameter containers and the Adam optimizer."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError
from .numerics import TRAIN_DTYPE, Tape, Tensor, as_tensor, record


class ParamSet:
    """Named parameter arrays, each flagged trainable or frozen.

    Names are dotted paths (``"backbone.block2.conv.w"``); iteration is in
    lexicographic order.
    """

    def __init__(self):
        self.entries: Dict[str, Tensor] = {}
        self.trainable: Dict[str, bool] = {}

    def add(self, name: str, data, trainable: bool) -> None:
        if name in self.entries:
            raise ContractError(f"duplicate parameter name {name!r}")
        self.entries[name] = Tensor(np.asarray(data))
        self.trainable[name] = bool(trainable)

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name].data

    def __len__(self) -> int:
        return len(self.entries)

    def names(self, prefix: str = ""):
        return [n for n in sorted(self.entries) if n.startswith(prefix)]

    def trainable_names(self):
        return [n for n in self.names() if self.trainable[n]]

    def frozen_names(self):
        return [n for n in self.names() if not self.trainable[n]]

    def num_params(self, trainable_only: bool = False) -> int:
        names = self.trainable_names() if trainable_only else self.names()
        return sum(self.entries[n].data.size for n in names)

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for n in self.names():
            out.add(n, self.entries[n].data.copy(), self.trainable[n])
        return out

    def astype(self, dtype) -> "ParamSet":
        out = ParamSet()
        for n in self.names():
            out.add(n, self.entries[n].data.astype(dtype), self.trainable[n])
        return out

    def subset(self, prefix: str) -> "ParamSet":
        out = ParamSet()
        for n in self.names(prefix):
            out.add(n, self.entries[n].data, self.trainable[n])
        return out

    def merged(self, other: "ParamSet") -> "ParamSet":
        """Union of two sets; names must not collide."""
        out = self.copy()
        for n in other.names():
            out.add(n, other[n].copy(), other.trainable[n])
        return out

    def set_trainable(self, prefix: str, flag: bool) -> None:
        for n in self.names(prefix):
            self.trainable[n] = flag

    def tensors(self, tape: Optional[Tape] = None,
                watch: Optional[Iterable[str]] = None) -> Dict[str, Tensor]:
        """Fresh tensor views of every entry.

        With a tape, the names in ``watch`` (default: trainable entries) are
        registered as leaves; everything else is a constant.
        """
        if tape is not None and watch is None:
            watch = self.trainable_names()
        watch = set(watch or ())
        out = {}
        for n in self.names():
            t = Tensor(self.entries[n].data)
            if tape is not None and n in watch:
                tape.watch(t)
            out[n] = t
        return out

    def equal(self, other: "ParamSet", names: Optional[Sequence[str]] = None) -> bool:
        """Bit-exact comparison of the given entries (default: all)."""
        names = self.names() if names is None else names
        for n in names:
            if n not in other.entries:
                return False
            a, b = self[n], other[n]
            if a.shape != b.shape or a.dtype != b.dtype or a.tobytes() != b.tobytes():
                return False
        return True


# ---------------------------------------------------------------------------
# ops


def _im2col(x: np.ndarray) -> np.ndarray:
    # x: (N, C, H, W) -> (N*H*W, 9*C), columns ordered (di, dj, c); zero padding 1
    n, c, h, w = x.shape
    xp = np.zeros((n, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1] = x.transpose(0, 2, 3, 1)
    cols = np.concatenate([xp[:, i:i + h, j:j + w] for i in range(3) for j in range(3)], axis=3)
    return cols.reshape(n * h * w, 9 * c)


def _flat_kernel(w: np.ndarray) -> np.ndarray:
    # (O, C, 3, 3) -> (9*C, O) matching _im2col's column order
    return w.transpose(2, 3, 1, 0).reshape(-1, w.shape[0])


def _conv_fwd(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray], cols=None) -> np.ndarray:
    n, _, h, wd = x.shape
    o = w.shape[0]
    out = (_im2col(x) if cols is None else cols) @ _flat_kernel(w)
    if b is not None:
        out = out + b
    return out.reshape(n, h, wd, o).transpose(0, 3, 1, 2)


def conv3x3(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Stride-1 cross-correlation with zero padding 1.

    ``x`` is ``[C_in, H, W]`` or a batch ``[N, C_in, H, W]``; ``w`` is
    ``[C_out, C_in, 3, 3]``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if w.data.ndim != 4 or w.shape[2:] != (3, 3):
        raise DimensionError(f"conv weight must be [C_out, C_in, 3, 3], got {w.shape}")
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or xd.shape[1] != w.shape[1]:
        raise DimensionError(f"input {x.shape} does not match weight {w.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise DimensionError(f"bias must be [{w.shape[0]}], got {b.shape}")
    cols = _im2col(xd)
    out = _conv_fwd(xd, w.data, None if b is None else b.data, cols)

    def vjp(g):
        g4 = g[None] if single else g
        n, o, h, wd = g4.shape
        g2 = g4.transpose(0, 2, 3, 1).reshape(n * h * wd, o)
        gw = None
        if w.requires_grad:
            gw = (g2.T @ cols).reshape(o, 3, 3, -1).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            wt = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx = _conv_fwd(g4, wt, None)
            gx = gx[0] if single else gx
        gb = g2.sum(axis=0) if b is not None else None
        return (gx, gw) if b is None else (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return record(out[0] if single else out, inputs, vjp)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``w @ x + b`` applied along the last axis of ``x``."""
    x, w = as_tensor(x), as_tensor(w)
    if w.data.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise DimensionError(f"linear: bias {b.shape} incompatible with weight {w.shape}")
        out = out + b.data

    def vjp(g):
        gx = g @ w.data
        g2 = g.reshape(-1, w.shape[0])
        gw = g2.T @ x.data.reshape(-1, w.shape[1])
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return record(out, (x, w) if b is None else (x, w, b), vjp)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return record(s, (x,), lambda g: (g * s * (1 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return record(t, (x,), lambda g: (g * (1 - t * t),))


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def activation(kind: str, x: Tensor) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ContractError(f"unknown activation {kind!r}") from None
    return fn(as_tensor(x))


def gap(x: Tensor) -> Tensor:
    """Spatial mean over the last two axes: ``[..., C, H, W] -> [..., C]``."""
    x = as_tensor(x)
    h, w = x.shape[-2:]

    def vjp(g):
        return (np.broadcast_to(g[..., None, None] / (h * w), x.shape).astype(x.dtype),)

    return record(x.data.mean(axis=(-2, -1)), (x,), vjp)


def channel_scale(x: Tensor, p: Tensor) -> Tensor:
    """``out[..., c, h, w] = x[..., c, h, w] * p[..., c]``."""
    x, p = as_tensor(x), as_tensor(p)
    if x.shape[:-2] != p.shape:
        raise DimensionError(f"channel_scale: map {x.shape} vs prompt {p.shape}")
    pe = p.data[..., None, None]
    return record(x.data * pe, (x, p),
                  lambda g: (g * pe, (g * x.data).sum(axis=(-2, -1))))


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """``x / sqrt(sum(x**2) + eps)`` along the last axis."""
    x = as_tensor(x)
    r = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True) + eps)
    y = x.data / r

    def vjp(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / r,)

    return record(y, (x,), vjp)


def softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis, max-shifted."""
    x = as_tensor(x)
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return record(s, (x,), vjp)


def ce_loss(logits: Tensor, label) -> Tensor:
    """Cross-entropy ``-log softmax(logits)[label]``.

    For a batch ``[B, K]`` with ``label`` of length ``B`` the mean is returned.
    The result has shape ``[1]``.
    """
    logits = as_tensor(logits)
    z = logits.data
    single = z.ndim == 1
    z2 = z[None] if single else z
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    if labels.shape != (z2.shape[0],):
        raise DimensionError(f"{labels.size} labels for {z2.shape[0]} rows of logits")
    k = z2.shape[1]
    if labels.min() < 0 or labels.max() >= k:
        raise ContractError(f"label out of range for {k} classes")
    m = z2.max(axis=1, keepdims=True)
    e = np.exp(z2 - m)
    lse = m[:, 0] + np.log(e.sum(axis=1))
    rows = np.arange(z2.shape[0])
    loss = (lse - z2[rows, labels]).mean()
    probs = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        d = probs.copy()
        d[rows, labels] -= 1
        d *= g.reshape(()) / z2.shape[0]
        return (d[0] if single else d,)

    return record(np.asarray([loss], dtype=z.dtype), (logits,), vjp)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamSet, **hyper) -> "AdamState":
        st = cls(**hyper)
        for n in params.trainable_names():
            st.m[n] = np.zeros_like(params[n])
            st.v[n] = np.zeros_like(params[n])
        return st


def adam_step(params: ParamSet, grads: Mapping[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update of the trainable entries, in place.

    Weight decay shrinks each trainable parameter by ``lr * wd * theta``.
    Frozen entries are never touched.
    """
    names = params.trainable_names()
    for n in names:
        if n not in grads or grads[n] is None:
            raise ContractError(f"missing gradient for trainable parameter {n!r}")
        if n not in state.m:
            state.m[n] = np.zeros_like(params[n])
            state.v[n] = np.zeros_like(params[n])
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for n in names:
        theta = params[n]
        g = np.asarray(grads[n], dtype=theta.dtype).reshape(theta.shape)
        m = state.m[n] = b1 * state.m[n] + (1 - b1) * g
        v = state.v[n] = b2 * state.v[n] + (1 - b2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new = theta - step - state.lr * state.weight_decay * theta
        params.entries[n] = Tensor(new.astype(theta.dtype))
    return params, state

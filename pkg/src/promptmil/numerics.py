"""Tensors, a reverse-mode tape, a seeded PRNG and a finite-difference checker.

A :class:`Tensor` wraps a numpy array.  Operations that receive at least one
tensor living on a :class:`Tape` record a node holding a vector-Jacobian
product; :func:`backward` replays those nodes in reverse order.  Tensors that
are not on a tape behave as constants, so the same forward code serves both
training (with a tape) and inference or finite differencing (without one).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, DimensionError, NumericError

TRAIN_DTYPE = np.float32
WIDE_DTYPE = np.float64


class Tensor:
    """Dense array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "tape", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(TRAIN_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.tape: Optional[Tape] = None
        self.node: Optional[int] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar for the handful of elementwise ops the model uses
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


def tensor_new(shape: Sequence[int], fill: Union[float, Sequence[float], np.ndarray] = 0.0,
               dtype=TRAIN_DTYPE) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise DimensionError(f"shape must be nonempty with dims >= 1, got {shape}")
    if np.isscalar(fill):
        return Tensor(np.full(shape, fill, dtype=dtype))
    flat = np.asarray(fill, dtype=dtype).reshape(-1)
    if flat.size != int(np.prod(shape)):
        raise DimensionError(f"fill has {flat.size} values, shape {shape} needs {int(np.prod(shape))}")
    return Tensor(flat.reshape(shape).copy())


# ---------------------------------------------------------------------------
# tape

VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    inputs: Tuple[Optional[int], ...]
    output: int
    vjp: Optional[VJP]


class Tape:
    """Ordered record of whole-tensor operations.

    Node ids are assigned in creation order, so every input id is smaller than
    the id of the node consuming it.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self._tensors: List[Tensor] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def watch(self, t: Tensor, requires_grad: bool = True) -> Tensor:
        """Register ``t`` as a leaf and return it."""
        if t.tape is not None:
            raise ContractError("tensor is already recorded on a tape")
        t.requires_grad = requires_grad
        self._attach(t, (), None)
        return t

    def _attach(self, t: Tensor, inputs, vjp) -> None:
        t.tape = self
        t.node = len(self.nodes)
        self.nodes.append(Node(tuple(inputs), t.node, vjp))
        self._tensors.append(t)

    def tensor(self, node: int) -> Tensor:
        return self._tensors[node]


def _tape_of(inputs: Iterable[Tensor]) -> Optional[Tape]:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ContractError("inputs recorded on different tapes")
            tape = t.tape
    return tape


def record(out: np.ndarray, inputs: Sequence[Tensor], vjp: VJP) -> Tensor:
    """Wrap ``out`` as the result of an op; record it if any input is taped."""
    if not np.isfinite(out).all():
        raise NumericError("operation produced non-finite values")
    res = Tensor(out)
    tape = _tape_of(inputs)
    if tape is not None:
        res.requires_grad = any(t.requires_grad for t in inputs)
        tape._attach(res, [t.node for t in inputs], vjp)
    return res


def backward(tape: Tape, loss: Tensor) -> Dict[int, np.ndarray]:
    """Reverse sweep from a scalar ``loss``.

    Returns gradients keyed by node id and fills ``.grad`` on every tensor of
    the tape that requires a gradient.
    """
    if loss.tape is not tape:
        raise ContractError("loss is not recorded on this tape")
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.get(node.output)
        if g is None or node.vjp is None:
            continue
        parts = node.vjp(g)
        for i, part in zip(node.inputs, parts):
            if i is None or part is None or not tape.tensor(i).requires_grad:
                continue
            if i in grads:
                grads[i] = grads[i] + part
            else:
                grads[i] = part
    for i, g in grads.items():
        t = tape.tensor(i)
        if t.requires_grad:
            t.grad = g
    return grads


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=TRAIN_DTYPE))


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return record(a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(old),))


def tsum(a: Tensor) -> Tensor:
    return record(np.asarray(a.data.sum(), dtype=a.dtype).reshape(1), (a,),
                  lambda g: (np.broadcast_to(g.reshape(()), a.shape).copy(),))


def stack(ts: Sequence[Tensor]) -> Tensor:
    """Stack equal-shaped tensors along a new leading axis."""
    if not ts:
        raise ContractError("cannot stack an empty sequence")
    shape = ts[0].shape
    if any(t.shape != shape for t in ts):
        raise DimensionError("stack requires equal shapes")
    return record(np.stack([t.data for t in ts]), tuple(ts), lambda g: tuple(g))


# ---------------------------------------------------------------------------
# PRNG: xoshiro256** seeded through splitmix64

_MASK = (1 << 64) - 1


def _splitmix64(x: int) -> Tuple[int, int]:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return x, z ^ (z >> 31)


def _fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for b in text.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & _MASK
    return h


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK


class Rng:
    """xoshiro256** generator keyed by ``(seed, stream_label)``.

    The label is hashed with FNV-1a and mixed into the seed, then splitmix64
    expands the result into the four state words.  Uniform doubles take the
    top 53 bits; gaussians use Box-Muller (both outputs of each pair are
    used, in order); permutations are Fisher-Yates with Lemire's unbiased
    bounded integers.
    """

    def __init__(self, seed: int, stream_label: str = ""):
        if seed < 0:
            raise ContractError("seed must be non-negative")
        self.seed = int(seed)
        self.stream_label = stream_label
        x = (self.seed ^ _fnv1a64(stream_label)) & _MASK
        s = []
        for _ in range(4):
            x, z = _splitmix64(x)
            s.append(z)
        self.state = s

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.state
        result = (_rotl((s1 * 5) & _MASK, 7) * 9) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.state = [s0, s1, s2, s3]
        return result

    def _u64_array(self, n: int) -> List[int]:
        s0, s1, s2, s3 = self.state
        out = [0] * n
        for i in range(n):
            out[i] = (((((s1 * 5) & _MASK) << 7 | ((s1 * 5) & _MASK) >> 57) & _MASK) * 9) & _MASK
            t = (s1 << 17) & _MASK
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = ((s3 << 45) | (s3 >> 19)) & _MASK
        self.state = [s0, s1, s2, s3]
        return out

    def random(self, size: Optional[int] = None):
        """Uniform doubles in [0, 1)."""
        if size is None:
            return (self.next_u64() >> 11) * (1.0 / (1 << 53))
        raw = np.array(self._u64_array(int(size)), dtype=np.uint64) >> np.uint64(11)
        return raw.astype(np.float64) * (1.0 / (1 << 53))

    def uniform(self, a: float = 0.0, b: float = 1.0, size: Optional[int] = None):
        if not b > a:
            raise ContractError(f"uniform requires b > a, got a={a}, b={b}")
        u = self.random(size)
        return a + (b - a) * u

    def gaussian(self, mu: float = 0.0, sigma: float = 1.0, size: Optional[int] = None):
        if sigma < 0:
            raise ContractError(f"sigma must be >= 0, got {sigma}")
        n = 1 if size is None else int(size)
        pairs = (n + 1) // 2
        u = self.random(2 * pairs)
        u1 = 1.0 - u[0::2]  # (0, 1]
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        z = mu + sigma * z[:n]
        return float(z[0]) if size is None else z

    def integer(self, n: int) -> int:
        """Unbiased integer in [0, n)."""
        if n < 1:
            raise ContractError("integer bound must be >= 1")
        threshold = ((1 << 64) - n) % n
        while True:
            m = self.next_u64() * n
            if (m & _MASK) >= threshold:
                return m >> 64

    def permutation(self, n: int) -> List[int]:
        if n < 1:
            raise ContractError("permutation size must be >= 1")
        p = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integer(i + 1)
            p[i], p[j] = p[j], p[i]
        return p


def rng_draw(rng: Rng, dist: str, *args):
    """Dispatch helper: ``dist`` is ``"uniform"``, ``"gaussian"`` or ``"permutation"``."""
    if dist == "uniform":
        return rng.uniform(*args)
    if dist == "gaussian":
        return rng.gaussian(*args)
    if dist == "permutation":
        return rng.permutation(*args)
    raise ContractError(f"unknown distribution {dist!r}")


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[Dict[str, Tensor]], Tensor], params, eps: float = 1e-4,
               names: Optional[Sequence[str]] = None, max_coords: int = 16,
               seed: int = 0) -> float:
    """Max relative error between taped and central-difference gradients.

    ``f`` maps a name->Tensor dict to a scalar tensor.  ``params`` is a
    :class:`~promptmil.layers.ParamSet`; every entry is promoted to float64.
    Gradients are checked for ``names`` (default: the trainable entries), at
    up to ``max_coords`` coordinates per entry, sampled with a fixed stream.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    wide = params.astype(WIDE_DTYPE)
    names = list(wide.trainable_names() if names is None else names)

    tape = Tape()
    leaves = wide.tensors(tape=tape, watch=names)
    loss = f(leaves)
    if not np.isfinite(loss.data).all():
        raise NumericError("f returned a non-finite value")
    if loss.tape is tape:
        backward(tape, loss)

    def value(arrays: Dict[str, np.ndarray]) -> float:
        out = f({k: Tensor(v) for k, v in arrays.items()})
        val = float(out.data.reshape(-1)[0])
        if not np.isfinite(val):
            raise NumericError("f returned a non-finite value")
        return val

    rng = Rng(seed, "gradcheck")
    base = {k: v.data.copy() for k, v in wide.entries.items()}
    worst = 0.0
    for name in names:
        g_an = leaves[name].grad
        if g_an is None:
            g_an = np.zeros_like(base[name])
        size = base[name].size
        if size <= max_coords:
            coords = range(size)
        else:
            coords = rng.permutation(size)[:max_coords]
        for c in coords:
            flat = base[name].reshape(-1)
            orig = flat[c]
            flat[c] = orig + eps
            fp = value(base)
            flat[c] = orig - eps
            fm = value(base)
            flat[c] = orig
            g_num = (fp - fm) / (2.0 * eps)
            a = float(g_an.reshape(-1)[c])
            denom = max(abs(a), abs(g_num), 1e-8)
            worst = max(worst, abs(a - g_num) / denom)
    return worst

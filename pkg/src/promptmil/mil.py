"""Gated-attention MIL classifier.

Parameters live in a :class:`ParamSet` under the ``mil.`` prefix::

    mil.V1, mil.V2   [M, L]    attention branches (tanh / sigmoid)
    mil.w            [M]       attention projection
    mil.head_w       [2, L]    bag classifier
    mil.head_b       [2]
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence, Union

import numpy as np

from .errors import ContractError, DimensionError
from .layers import ParamSet, linear, sigmoid, softmax, tanh
from .numerics import TRAIN_DTYPE, Rng, Tensor, as_tensor, mul, record, reshape, stack

MIL_NAMES = ("mil.V1", "mil.V2", "mil.head_b", "mil.head_w", "mil.w")


@dataclass
class AttentionResult:
    alphas: Tensor
    bag_feature: Tensor
    logits: Tensor

    @property
    def probability(self) -> float:
        z = self.logits.data.astype(np.float64)
        e = np.exp(z - z.max())
        return float(e[1] / e.sum())

    @property
    def predicted(self) -> int:
        return int(np.argmax(self.logits.data))


def mil_init(feature_dim: int, rng: Rng, hidden: int = 128) -> ParamSet:
    """LeCun-normal attention weights and a zero head; all trainable.

    With the head at zero the attention branch gets no gradient until the
    head has picked up which pooled direction separates the classes, so the
    attention cannot learn to suppress the (rare) positive patches first.
    """
    if feature_dim < 1 or hidden < 1:
        raise ContractError("feature_dim and hidden must be >= 1")
    L, M = feature_dim, hidden

    def normal(shape, fan_in):
        n = int(np.prod(shape))
        return rng.gaussian(0.0, float(np.sqrt(1.0 / fan_in)), n).reshape(shape).astype(TRAIN_DTYPE)

    ps = ParamSet()
    ps.add("mil.V1", normal((M, L), L), True)
    ps.add("mil.V2", normal((M, L), L), True)
    ps.add("mil.w", normal((M,), M), True)
    ps.add("mil.head_w", np.zeros((2, L), TRAIN_DTYPE), True)
    ps.add("mil.head_b", np.zeros(2, TRAIN_DTYPE), True)
    return ps


def _params(params) -> Mapping[str, Tensor]:
    return params.tensors() if isinstance(params, ParamSet) else params


def _features(features) -> Tensor:
    if isinstance(features, Tensor):
        h = features
    elif isinstance(features, np.ndarray):
        h = Tensor(features)
    else:
        feats = list(features)
        if not feats:
            raise ContractError("empty bag")
        h = stack([as_tensor(f) for f in feats])
    if h.data.ndim != 2:
        raise DimensionError(f"features must be [n, L], got {h.shape}")
    if h.shape[0] < 1:
        raise ContractError("empty bag")
    return h


def attention_logits(features, params) -> Tensor:
    """Unnormalised gated scores ``w . (tanh(V1 h) * sigmoid(V2 h))``, one per patch."""
    p = _params(params)
    h = _features(features)
    gated = mul(tanh(linear(h, p["mil.V1"])), sigmoid(linear(h, p["mil.V2"])))
    w = p["mil.w"]
    return reshape(linear(gated, reshape(w, (1, w.shape[0]))), (h.shape[0],))


def attention_scores(features, params) -> Tensor:
    """Softmax-normalised attention weights over the patches of one bag."""
    return softmax(attention_logits(features, params))


def bag_pool(features, alphas: Tensor) -> Tensor:
    """Attention-weighted sum of patch features, accumulated in patch order."""
    h = _features(features)
    a = as_tensor(alphas)
    if a.shape != (h.shape[0],):
        raise DimensionError(f"{a.shape} weights for {h.shape[0]} patches")
    s = float(a.data.sum(dtype=np.float64))
    if abs(s - 1.0) > 1e-5:
        raise ContractError(f"attention weights sum to {s}, expected 1")
    # axis-0 reduction of a C-contiguous array adds rows in index order
    out = (a.data[:, None] * h.data).sum(axis=0)
    return record(out, (h, a), lambda g: (np.outer(a.data, g), h.data @ g))


def classify_bag(features, params) -> AttentionResult:
    p = _params(params)
    h = _features(features)
    alphas = attention_scores(h, p)
    bag = bag_pool(h, alphas)
    logits = linear(bag, p["mil.head_w"], p["mil.head_b"])
    return AttentionResult(alphas, bag, logits)

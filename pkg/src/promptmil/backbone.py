"""Residual feature extractor with channel-gating prompt blocks.

Parameter names::

    backbone.stem.w / backbone.stem.b          [C, C_in, 3, 3] / [C]
    backbone.block{i}.conv.w / .b              [C, C, 3, 3] / [C]      i = 1..B
    backbone.norm.mean / backbone.norm.scale   [C]   output standardization (after pretraining)
    prompt.site{i}.w1                          [C/r, C]
    prompt.site{i}.w2                          [C, C/r]

A prompt at site ``i`` reads the block input ``f_i`` and gates the block
output channel-wise.

A pretrained extractor also carries output standardization buffers: the
pooled feature is scaled to unit length, then shifted and scaled per channel
with statistics measured on the source domain.  The buffers are never
trained, not even when the extractor is fine-tuned.  Unit-length scaling
makes the output blind to a uniform rescale of the last feature map, so
prompts that all start at 0.5 leave a downstream classifier's inputs
(nearly) unchanged.  A freshly initialized extractor has no buffers and
returns the plain pooled feature.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, Mapping, Optional, Tuple, Union

import numpy as np

from .errors import ConfigError, ContractError
from .layers import (AdamState, ParamSet, adam_step, ce_loss, channel_scale, conv3x3, gap, l2_normalize, linear, relu,
                     sigmoid)
from .numerics import TRAIN_DTYPE, Rng, Tape, Tensor, add, backward, mul

PRESETS = {
    "resnet18-like": dict(num_blocks=4, prompt_sites=(3, 4)),
    "resnet50-like": dict(num_blocks=6, prompt_sites=(1, 2, 3, 4, 5, 6)),
}


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 3
    channels: int = 32
    height: int = 8
    width: int = 8
    num_blocks: int = 4
    prompt_sites: Tuple[int, ...] = (3, 4)
    reduction: int = 4
    preset_name: Optional[str] = "resnet18-like"

    def __post_init__(self):
        object.__setattr__(self, "prompt_sites", tuple(sorted(set(int(s) for s in self.prompt_sites))))
        if min(self.in_channels, self.channels, self.height, self.width, self.num_blocks, self.reduction) < 1:
            raise ConfigError("backbone dimensions must be positive")
        if self.channels % self.reduction:
            raise ConfigError(f"reduction {self.reduction} must divide channels {self.channels}")
        bad = [s for s in self.prompt_sites if not 1 <= s <= self.num_blocks]
        if bad:
            raise ConfigError(f"prompt sites {bad} outside 1..{self.num_blocks}")

    @classmethod
    def preset(cls, name: str, **overrides) -> "BackboneConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown backbone preset {name!r}; choose from {sorted(PRESETS)}")
        kw = dict(PRESETS[name], preset_name=name)
        kw.update(overrides)
        return cls(**kw)

    def with_sites(self, sites: Iterable[int]) -> "BackboneConfig":
        d = asdict(self)
        d["prompt_sites"] = tuple(sites)
        return BackboneConfig(**d)

    @property
    def hidden(self) -> int:
        return self.channels // self.reduction

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prompt_sites"] = list(self.prompt_sites)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "BackboneConfig":
        d = dict(d)
        d["prompt_sites"] = tuple(d.get("prompt_sites", ()))
        return cls(**d)


def _kaiming(rng: Rng, shape, fan_in: int) -> np.ndarray:
    n = int(np.prod(shape))
    return rng.gaussian(0.0, float(np.sqrt(2.0 / fan_in)), n).reshape(shape).astype(TRAIN_DTYPE)


def backbone_init(cfg: BackboneConfig, rng: Rng, with_prompts: bool = True) -> ParamSet:
    """Frozen Kaiming-initialized backbone, plus trainable prompts at ``cfg.prompt_sites``."""
    c = cfg.channels
    ps = ParamSet()
    ps.add("backbone.stem.w", _kaiming(rng, (c, cfg.in_channels, 3, 3), cfg.in_channels * 9), False)
    ps.add("backbone.stem.b", np.zeros(c, TRAIN_DTYPE), False)
    for i in range(1, cfg.num_blocks + 1):
        ps.add(f"backbone.block{i}.conv.w", _kaiming(rng, (c, c, 3, 3), c * 9), False)
        ps.add(f"backbone.block{i}.conv.b", np.zeros(c, TRAIN_DTYPE), False)
    if with_prompts:
        ps = ps.merged(prompt_init(cfg, rng))
    return ps


def set_extractor_trainable(params: ParamSet, flag: bool) -> None:
    """Flip the conv weights and biases; normalization buffers stay frozen."""
    for n in params.names("backbone."):
        params.trainable[n] = flag and not n.startswith("backbone.norm.")


def prompt_init(cfg: BackboneConfig, rng: Rng, sites: Optional[Iterable[int]] = None) -> ParamSet:
    # w2 = 0 makes every prompt exactly 0.5 at init; w1 is random because with
    # both matrices zero the gradient of each w.r.t. the loss vanishes.
    c, h = cfg.channels, cfg.hidden
    ps = ParamSet()
    for i in (cfg.prompt_sites if sites is None else sites):
        ps.add(f"prompt.site{i}.w1", _kaiming(rng, (h, c), c), True)
        ps.add(f"prompt.site{i}.w2", np.zeros((c, h), TRAIN_DTYPE), True)
    return ps


def prompt_vector(f: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """sigmoid(w2 · relu(w1 · gap(f)))"""
    return sigmoid(linear(relu(linear(gap(f), w1)), w2))


def _as_tensors(params: Union[ParamSet, Mapping[str, Tensor]]) -> Mapping[str, Tensor]:
    return params.tensors() if isinstance(params, ParamSet) else params


def backbone_forward(patch, params, cfg: BackboneConfig, prompts: bool = True,
                     prompt_override: Optional[float] = None) -> Tensor:
    """Map a patch ``[C_in, H, W]`` (or batch ``[N, C_in, H, W]``) to features ``[C]`` / ``[N, C]``.

    With ``prompts`` false the plain frozen extractor is evaluated.
    ``prompt_override`` replaces every prompt vector by a constant, which is
    how the identity equivalence (all-ones prompts) is exercised.
    """
    p = _as_tensors(params)
    x = patch if isinstance(patch, Tensor) else Tensor(np.asarray(patch))
    sites = set(cfg.prompt_sites) if prompts else set()
    for s in sites:
        if prompt_override is None and (f"prompt.site{s}.w1" not in p or f"prompt.site{s}.w2" not in p):
            raise ConfigError(f"missing prompt parameters for site {s}")
    f = relu(conv3x3(x, p["backbone.stem.w"], p["backbone.stem.b"]))
    for i in range(1, cfg.num_blocks + 1):
        y = relu(add(f, conv3x3(f, p[f"backbone.block{i}.conv.w"], p[f"backbone.block{i}.conv.b"])))
        if i in sites:
            if prompt_override is not None:
                pv = Tensor(np.full(y.shape[:-2], prompt_override, dtype=y.dtype))
            else:
                pv = prompt_vector(f, p[f"prompt.site{i}.w1"], p[f"prompt.site{i}.w2"])
            y = channel_scale(y, pv)
        f = y
    out = gap(f)
    if "backbone.norm.mean" in p:
        out = mul(add(l2_normalize(out), p["backbone.norm.mean"] * -1.0), p["backbone.norm.scale"])
    return out


def extract_features(patches: np.ndarray, params: ParamSet, cfg: BackboneConfig,
                     prompts: bool = False, prompt_override: Optional[float] = None,
                     chunk: int = 256) -> np.ndarray:
    """Untaped forward over ``[N, C_in, H, W]`` in fixed chunks; returns ``[N, C]``."""
    p = params.tensors()
    out = np.empty((patches.shape[0], cfg.channels), dtype=TRAIN_DTYPE)
    for s in range(0, patches.shape[0], chunk):
        out[s:s + chunk] = backbone_forward(patches[s:s + chunk], p, cfg, prompts, prompt_override).data
    return out


def pretrain_backbone(patches: np.ndarray, labels: np.ndarray, cfg: BackboneConfig, rng_seed: int,
                      epochs: int = 50, lr: float = 1e-3, batch_size: int = 32,
                      val_fraction: float = 0.2) -> Tuple[ParamSet, Dict[str, float]]:
    """Supervised source-domain training of the backbone and a throwaway linear head.

    The last ``val_fraction`` of the (already shuffled) source set is held out
    for the reported validation accuracy.  Returns frozen backbone weights
    (no prompt entries) and ``{"train_acc", "val_acc"}``.
    """
    patches = np.asarray(patches, dtype=TRAIN_DTYPE)
    labels = np.asarray(labels, dtype=np.int64)
    n = patches.shape[0]
    if n == 0:
        raise ContractError("empty source dataset")
    if labels.shape != (n,):
        raise ContractError("one label per source patch required")
    n_val = int(round(n * val_fraction)) if n > 1 else 0
    n_tr = n - n_val

    init_rng = Rng(rng_seed, "init")
    params = backbone_init(cfg, init_rng, with_prompts=False)
    head_sigma = float(np.sqrt(1.0 / cfg.channels))
    params.add("pretrain.head.w", init_rng.gaussian(0, head_sigma, 2 * cfg.channels)
               .reshape(2, cfg.channels).astype(TRAIN_DTYPE), True)
    params.add("pretrain.head.b", np.zeros(2, TRAIN_DTYPE), True)
    set_extractor_trainable(params, True)

    state = AdamState.for_params(params, lr=lr, weight_decay=0.0)
    shuffle = Rng(rng_seed, "shuffle")
    for _ in range(epochs):
        order = np.asarray(shuffle.permutation(n_tr)) if n_tr > 1 else np.arange(n_tr)
        for s in range(0, n_tr, batch_size):
            idx = order[s:s + batch_size]
            tape = Tape()
            t = params.tensors(tape)
            feats = backbone_forward(patches[idx], t, cfg, prompts=False)
            loss = ce_loss(linear(feats, t["pretrain.head.w"], t["pretrain.head.b"]), labels[idx])
            backward(tape, loss)
            adam_step(params, {k: t[k].grad for k in params.trainable_names()}, state)

    def acc(sl: slice) -> float:
        if sl.stop - sl.start <= 0:
            return float("nan")
        feats = extract_features(patches[sl], params, cfg)
        logits = feats @ params["pretrain.head.w"].T + params["pretrain.head.b"]
        return float((logits.argmax(axis=1) == labels[sl]).mean())

    info = {"train_acc": acc(slice(0, n_tr)), "val_acc": acc(slice(n_tr, n))}
    out = params.subset("backbone.").copy()
    out.set_trainable("backbone.", False)
    if epochs > 0:
        feats = extract_features(patches[:n_tr], out, cfg)
        unit = l2_normalize(Tensor(feats)).data.astype(np.float64)
        out.add("backbone.norm.mean", unit.mean(axis=0).astype(TRAIN_DTYPE), False)
        out.add("backbone.norm.scale", (1.0 / np.maximum(unit.std(axis=0), 1e-6)).astype(TRAIN_DTYPE), False)
    return out, info

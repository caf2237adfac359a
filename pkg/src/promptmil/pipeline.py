"""Three-stage training: MIL on frozen features, patch selection, prompt tuning.

Methods:

``baseline``  MIL classifier trained on frozen-extractor features of all patches.
``rps_ft``    selected patches fine-tune the whole extractor plus the MIL classifier.
``rps_pt``    selected patches tune prompt blocks plus the MIL classifier; the
              extractor stays frozen.

Every training run optimizes one bag per Adam step and keeps the epoch with
the best validation AUC (lower validation loss breaks ties; the final epoch
is kept when validation AUC is undefined).
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import config as kvconfig
from .backbone import (BackboneConfig, backbone_forward, extract_features, pretrain_backbone, prompt_init,
                       set_extractor_trainable)
from .checkpoint import Checkpoint
from .errors import ConfigError, ContractError, InvariantError, StalenessError
from .layers import AdamState, ParamSet, adam_step, ce_loss
from .metrics import MetricsRecord, auc_or_none
from .mil import classify_bag, mil_init
from .numerics import Rng, Tape, backward
from .rps import Selection, materialize_selected_bag, select_representatives
from .synthdata import FeatureBag, PatchBag

log = logging.getLogger(__name__)

METHODS = ("baseline", "rps_ft", "rps_pt")


@dataclass
class ExperimentConfig:
    preset: str = "resnet18-like"
    method: str = "rps_pt"
    K: int = 16
    epochs: int = 100
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch: int = 1
    seed: int = 1
    mil_hidden: int = 128
    mil_init: str = "warm"
    prompt_sites: Optional[Tuple[int, ...]] = None
    pretrain_epochs: int = 50
    pretrain_lr: float = 1e-3
    stage1_epochs: Optional[int] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch != 1:
            raise ConfigError("only one bag per optimizer step is supported")
        if self.mil_init not in ("warm", "fresh"):
            raise ConfigError("mil_init must be 'warm' or 'fresh'")
        if self.prompt_sites is not None:
            self.prompt_sites = tuple(int(s) for s in self.prompt_sites)
        self.backbone_config()  # validates preset and sites

    def backbone_config(self) -> BackboneConfig:
        cfg = BackboneConfig.preset(self.preset)
        return cfg if self.prompt_sites is None else cfg.with_sites(self.prompt_sites)

    def adam(self, params: ParamSet) -> AdamState:
        return AdamState.for_params(params, lr=self.lr, beta1=self.beta1, beta2=self.beta2,
                                    eps=self.adam_eps, weight_decay=self.weight_decay)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["prompt_sites"] = "" if self.prompt_sites is None else list(self.prompt_sites)
        d["stage1_epochs"] = "" if self.stage1_epochs is None else self.stage1_epochs
        return d

    def fingerprint(self) -> str:
        return kvconfig.fingerprint(self.as_dict())

    @classmethod
    def from_kv(cls, values: Dict[str, str]) -> "ExperimentConfig":
        kw = {}
        for k, v in values.items():
            if k not in cls.__dataclass_fields__:
                raise ConfigError(f"unknown config key {k!r}")
            if k == "prompt_sites":
                kw[k] = None if v == "" else tuple(int(s) for s in v.replace(";", ",").split(",") if s)
            elif k == "stage1_epochs":
                kw[k] = None if v == "" else int(v)
            elif k in ("preset", "method", "mil_init"):
                kw[k] = v
            elif k in ("K", "epochs", "batch", "seed", "mil_hidden", "pretrain_epochs"):
                kw[k] = int(v)
            else:
                kw[k] = float(v)
        return cls(**kw)


# ---------------------------------------------------------------------------
# helpers


def bag_probabilities(features: Sequence[np.ndarray], params: ParamSet) -> np.ndarray:
    t = params.tensors()
    return np.array([classify_bag(f, t).probability for f in features])


def _val_stats(features: Sequence[np.ndarray], labels: Sequence[int], params: ParamSet):
    t = params.tensors()
    probs, losses = [], []
    for f, y in zip(features, labels):
        res = classify_bag(f, t)
        probs.append(res.probability)
        losses.append(float(ce_loss(res.logits, y).data[0]))
    return auc_or_none(probs, labels), float(np.mean(losses)) if losses else float("nan")


def extract_bag_features(bags: Dict[str, List[PatchBag]], params: ParamSet, cfg: BackboneConfig,
                         fingerprint: str = "", prompts: bool = False,
                         prompt_override: Optional[float] = None) -> Dict[str, List[FeatureBag]]:
    """Per-bag, untaped feature extraction (one forward per bag, so results
    do not depend on how bags are grouped)."""
    out = {}
    for split, items in bags.items():
        out[split] = [
            FeatureBag(b.bag_id, b.label,
                       extract_features(b.patches, params, cfg, prompts, prompt_override, chunk=max(len(b), 1)),
                       fingerprint)
            for b in items
        ]
    return out


@dataclass
class TrainResult:
    params: ParamSet
    epoch: int
    val_auc: Optional[float]
    val_loss: float
    history: List[Tuple[int, Optional[float], float]] = field(default_factory=list)


def train_loop(params: ParamSet, n_items: int, step_loss: Callable, validate: Callable,
               cfg: ExperimentConfig, epochs: int, stream: str) -> TrainResult:
    """Generic bag-per-step Adam loop with best-validation model selection.

    ``step_loss(i, tensors)`` builds the taped loss for training item ``i``;
    ``validate(params)`` returns ``(auc or None, mean loss)``.
    """
    state = cfg.adam(params)
    shuffle = Rng(cfg.seed, f"shuffle/{stream}")
    auc0, loss0 = validate(params) if epochs == 0 else (None, float("nan"))
    best = TrainResult(params.copy(), 0, auc0, loss0)
    any_auc = False
    for epoch in range(1, epochs + 1):
        order = shuffle.permutation(n_items) if n_items > 1 else list(range(n_items))
        for i in order:
            tape = Tape()
            t = params.tensors(tape)
            loss = step_loss(i, t)
            backward(tape, loss)
            adam_step(params, {n: t[n].grad if t[n].grad is not None else np.zeros_like(params[n])
                               for n in params.trainable_names()}, state)
        v_auc, v_loss = validate(params)
        best.history.append((epoch, v_auc, v_loss))
        if v_auc is not None:
            better = (not any_auc or v_auc > best.val_auc
                      or (v_auc == best.val_auc and v_loss < best.val_loss))
            if better:
                best.params, best.epoch, best.val_auc, best.val_loss = params.copy(), epoch, v_auc, v_loss
            any_auc = True
        elif not any_auc:
            best.params, best.epoch, best.val_auc, best.val_loss = params.copy(), epoch, None, v_loss
    log.debug("%s: best epoch %d val_auc=%s", stream, best.epoch, best.val_auc)
    return best


def _check_fingerprint(features: Dict[str, List[FeatureBag]], expected: str) -> None:
    for items in features.values():
        for fb in items:
            if fb.extractor_fingerprint != expected:
                raise StalenessError(
                    f"features of bag {fb.bag_id} come from extractor {fb.extractor_fingerprint[:12]}, "
                    f"backbone is {expected[:12]}")


def _meta(cfg: ExperimentConfig, bcfg: BackboneConfig, method: str, **extra) -> dict:
    d = {
        "method": method,
        "backbone": bcfg.to_dict(),
        "preset": cfg.preset,
        "seed": cfg.seed,
        "K": cfg.K,
        "mil_hidden": cfg.mil_hidden,
        "config": cfg.as_dict(),
    }
    d.update(extra)
    return d


# ---------------------------------------------------------------------------
# stage 0: source-domain pretraining


def pretrain(source: Tuple[np.ndarray, np.ndarray], cfg: ExperimentConfig) -> Checkpoint:
    bcfg = BackboneConfig.preset(cfg.preset)
    params, info = pretrain_backbone(source[0], source[1], bcfg, cfg.seed, cfg.pretrain_epochs, cfg.pretrain_lr)
    return Checkpoint(params, "backbone", cfg.pretrain_epochs, info, cfg.fingerprint(),
                      {"backbone": bcfg.to_dict(), "preset": cfg.preset, "seed": cfg.seed})


def backbone_params(ckpt: Checkpoint) -> ParamSet:
    p = ckpt.params.subset("backbone.").copy()
    p.set_trainable("backbone.", False)
    return p


# ---------------------------------------------------------------------------
# stage I


def stage1_train_mil(bags: Dict[str, List[PatchBag]], backbone: Checkpoint, cfg: ExperimentConfig,
                     features: Optional[Dict[str, List[FeatureBag]]] = None):
    """Train the MIL classifier on cached frozen features of every patch.

    Returns ``(checkpoint, features)``; the checkpoint is the evaluable
    ``baseline`` model (backbone + MIL weights).
    """
    bcfg = BackboneConfig.from_dict(backbone.extra["backbone"])
    fp = backbone.fingerprint()
    bparams = backbone_params(backbone)
    if features is None:
        features = extract_bag_features(bags, bparams, bcfg, fp)
    else:
        _check_fingerprint(features, fp)
    train, val = features["train"], features.get("val", [])
    params = mil_init(bcfg.channels, Rng(cfg.seed, "init/mil"), cfg.mil_hidden)
    labels = [fb.label for fb in train]
    val_feats, val_labels = [fb.features for fb in val], [fb.label for fb in val]

    def step_loss(i, t):
        return ce_loss(classify_bag(train[i].features, t).logits, labels[i])

    epochs = cfg.epochs if cfg.stage1_epochs is None else cfg.stage1_epochs
    res = train_loop(params, len(train), step_loss, lambda p: _val_stats(val_feats, val_labels, p),
                     cfg, epochs, "stage1")
    full = bparams.merged(res.params)
    ckpt = Checkpoint(full, "mil", res.epoch, {"val_auc": res.val_auc, "val_loss": res.val_loss},
                      cfg.fingerprint(), _meta(cfg, bcfg.with_sites(()), "baseline", extractor_fingerprint=fp))
    return ckpt, features


def mil_params(ckpt: Checkpoint) -> ParamSet:
    p = ckpt.params.subset("mil.").copy()
    p.set_trainable("mil.", True)
    return p


# ---------------------------------------------------------------------------
# stage II


def stage2_select(features: Dict[str, List[FeatureBag]], mil: Checkpoint, K: int,
                  splits: Sequence[str] = ("train", "val", "test")) -> Dict[str, List[Selection]]:
    mp = mil_params(mil)
    t = mp.tensors()
    out = {}
    for split in splits:
        if split in features:
            out[split] = [select_representatives(fb, t, K) for fb in features[split]]
    return out


def selection_margin(selections: Dict[str, List[Selection]]) -> float:
    """Mean over bags of (min kept score - max dropped score); bags with nothing dropped are skipped."""
    margins = []
    for sels in selections.values():
        for s in sels:
            kept = set(s.kept_indices)
            dropped = [v for i, v in enumerate(s.scores) if i not in kept]
            if dropped:
                margins.append(min(s.kept_scores) - max(dropped))
    return float(np.mean(margins)) if margins else 0.0


# ---------------------------------------------------------------------------
# stage III


def _selected_bags(bags: List[PatchBag], selections: List[Selection]) -> List[PatchBag]:
    by_id = {s.bag_id: s for s in selections}
    out = []
    for b in bags:
        if b.bag_id not in by_id:
            raise ContractError(f"no selection for bag {b.bag_id}")
        out.append(materialize_selected_bag(by_id[b.bag_id], b))
    return out


def _stage3(bags, selections, backbone: Checkpoint, mil: Checkpoint, cfg: ExperimentConfig,
            method: str) -> Checkpoint:
    bcfg = cfg.backbone_config()
    if method == "rps_ft":
        bcfg = bcfg.with_sites(())
    base = backbone_params(backbone)
    if cfg.mil_init == "warm":
        mp = mil_params(mil)
    else:
        mp = mil_init(bcfg.channels, Rng(cfg.seed, "init/mil3"), cfg.mil_hidden)
    params = base.merged(mp)
    if method == "rps_pt":
        params = params.merged(prompt_init(bcfg, Rng(cfg.seed, "init/prompt")))
    else:
        set_extractor_trainable(params, True)

    train = _selected_bags(bags["train"], selections["train"])
    val = bags.get("val", [])
    labels = [b.label for b in train]
    use_prompts = method == "rps_pt" and bool(bcfg.prompt_sites)
    tunes_extractor = use_prompts or method == "rps_ft"

    if tunes_extractor:
        def step_loss(i, t):
            feats = backbone_forward(train[i].patches, t, bcfg, prompts=use_prompts)
            return ce_loss(classify_bag(feats, t).logits, labels[i])

        def validate(p):
            vf = extract_bag_features({"val": val}, p, bcfg, prompts=use_prompts)["val"]
            return _val_stats([f.features for f in vf], [f.label for f in vf], p)
    else:
        # nothing upstream of the MIL head is trainable: features are constants
        cached = extract_bag_features({"train": train, "val": val}, base, bcfg)
        tf = [f.features for f in cached["train"]]
        vf, vl = [f.features for f in cached["val"]], [f.label for f in cached["val"]]

        def step_loss(i, t):
            return ce_loss(classify_bag(tf[i], t).logits, labels[i])

        def validate(p):
            return _val_stats(vf, vl, p)

    res = train_loop(params, len(train), step_loss, validate, cfg, cfg.epochs, f"stage3/{method}")

    if method == "rps_pt":
        frozen = base.names()
        if not res.params.equal(base, frozen) or not params.equal(base, frozen):
            raise InvariantError("frozen backbone weights changed during prompt tuning")
        res.params.set_trainable("backbone.", False)
    meta = _meta(cfg, bcfg, method, mil_checkpoint=mil.fingerprint(), mil_init=cfg.mil_init,
                 extractor_fingerprint=backbone.fingerprint())
    return Checkpoint(res.params, method, res.epoch, {"val_auc": res.val_auc, "val_loss": res.val_loss},
                      cfg.fingerprint(), meta)


def stage3_prompt_tune(bags, selections, backbone: Checkpoint, mil: Checkpoint,
                       cfg: ExperimentConfig) -> Checkpoint:
    """Tune prompt blocks and the MIL classifier on the selected patches; audit the freeze."""
    return _stage3(bags, selections, backbone, mil, cfg, "rps_pt")


def stage3_finetune_all(bags, selections, backbone: Checkpoint, mil: Checkpoint,
                        cfg: ExperimentConfig) -> Checkpoint:
    return _stage3(bags, selections, backbone, mil, cfg, "rps_ft")


def frozen_baseline_on_selected(bags, selections, backbone: Checkpoint, mil: Checkpoint,
                                cfg: ExperimentConfig) -> Checkpoint:
    """MIL retrained on frozen features of the selected patches only (no prompts)."""
    return _stage3(bags, selections, backbone, mil, replace(cfg, prompt_sites=()), "rps_pt")


def trainable_count(ckpt_or_params) -> int:
    p = ckpt_or_params.params if isinstance(ckpt_or_params, Checkpoint) else ckpt_or_params
    return p.num_params(trainable_only=True)


# ---------------------------------------------------------------------------
# evaluation


def evaluate(ckpt: Checkpoint, bags: Dict[str, List[PatchBag]], split: str = "test",
             features: Optional[Dict[str, List[FeatureBag]]] = None, use_prompts: bool = True,
             prompt_override: Optional[float] = None) -> MetricsRecord:
    """Bag-level metrics of a checkpoint on one split.

    Features of every patch in the split are extracted with the checkpoint's
    extractor (including prompts for ``rps_pt``) unless cached ``features``
    are supplied for a baseline checkpoint.
    """
    if split not in bags and (features is None or split not in features):
        raise ContractError(f"split {split!r} not in corpus")
    ex = ckpt.extra
    bcfg = BackboneConfig.from_dict(ex["backbone"])
    prompts = use_prompts and bool(bcfg.prompt_sites)
    if features is not None:
        if prompts:
            raise ContractError("cached features cannot be used with prompt blocks")
        _check_fingerprint(features, ex.get("extractor_fingerprint", ""))
        fbs = features[split]
    else:
        fbs = extract_bag_features({split: bags[split]}, ckpt.params, bcfg, prompts=prompts,
                                   prompt_override=prompt_override)[split]
    probs = bag_probabilities([f.features for f in fbs], ckpt.params.subset("mil."))
    labels = [f.label for f in fbs]
    return MetricsRecord.from_predictions(
        probs, labels, seed=int(ex.get("seed", 0)), config_fingerprint=ckpt.config_fingerprint,
        split=split, method=ex.get("method", ckpt.stage), backbone_preset=ex.get("preset", ""),
        K=ex.get("K") if ex.get("method") != "baseline" else None,
        prompt_sites=tuple(bcfg.prompt_sites) if prompts else ())


# ---------------------------------------------------------------------------
# end-to-end drivers


@dataclass
class SeedRun:
    seed: int
    backbone: Checkpoint
    mil: Checkpoint
    features: Dict[str, List[FeatureBag]]
    selections: Dict[str, List[Selection]]
    checkpoints: Dict[str, Checkpoint] = field(default_factory=dict)
    records: List[MetricsRecord] = field(default_factory=list)


def run_methods(bags, source, cfg: ExperimentConfig, methods: Sequence[str] = METHODS,
                splits: Sequence[str] = ("test",)) -> SeedRun:
    """Pretrain, stage I, stage II, then each requested method; evaluate on ``splits``."""
    backbone = pretrain(source, cfg)
    mil, feats = stage1_train_mil(bags, backbone, cfg)
    sels = stage2_select(feats, mil, cfg.K, splits=("train",))
    run = SeedRun(cfg.seed, backbone, mil, feats, sels)
    for m in methods:
        if m == "baseline":
            ck = mil
        elif m == "rps_pt":
            ck = stage3_prompt_tune(bags, sels, backbone, mil, replace(cfg, method=m))
        else:
            ck = stage3_finetune_all(bags, sels, backbone, mil, replace(cfg, method=m))
        run.checkpoints[m] = ck
        for split in splits:
            feats_arg = feats if m == "baseline" else None
            run.records.append(evaluate(ck, bags, split, features=feats_arg))
    return run


def sites_for_count(cfg: ExperimentConfig, count: int) -> Tuple[int, ...]:
    """The last ``count`` prompt sites of the preset (0 gives no prompts)."""
    sites = BackboneConfig.preset(cfg.preset).prompt_sites
    if not 0 <= count <= len(sites):
        raise ConfigError(f"site count {count} outside 0..{len(sites)} for preset {cfg.preset}")
    return tuple(sites[len(sites) - count:]) if count else ()


def ablate(bags, source, axis: str, values: Sequence[int], seeds: Sequence[int],
           cfg: ExperimentConfig, on_cell: Optional[Callable] = None) -> List[MetricsRecord]:
    """K or prompt-site-count sweep of ``rps_pt``; one test record per (value, seed).

    Stage I is shared across the K sweep; stages I and II are shared across
    the site-count sweep.  ``on_cell(value, seed, selections, checkpoint)``
    is called after each cell.
    """
    if axis not in ("k", "sites"):
        raise ConfigError(f"ablation axis must be 'k' or 'sites', got {axis!r}")
    if axis == "k" and any(v < 1 for v in values):
        raise ConfigError("K values must be >= 1")
    if axis == "sites":
        for v in values:
            sites_for_count(cfg, v)
    records = []
    for seed in seeds:
        scfg = replace(cfg, seed=seed, method="rps_pt")
        backbone = pretrain(source, scfg)
        mil, feats = stage1_train_mil(bags, backbone, scfg)
        shared = stage2_select(feats, mil, scfg.K, splits=("train",)) if axis == "sites" else None
        for v in values:
            if axis == "k":
                ccfg = replace(scfg, K=v)
                sels = stage2_select(feats, mil, v, splits=("train",))
            else:
                ccfg = replace(scfg, prompt_sites=sites_for_count(scfg, v))
                sels = shared
            ck = stage3_prompt_tune(bags, sels, backbone, mil, ccfg)
            rec = evaluate(ck, bags, "test")
            records.append(rec)
            if on_cell is not None:
                on_cell(v, seed, sels, ck)
    return records

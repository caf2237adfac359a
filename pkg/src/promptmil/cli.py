"""Command-line driver: one subcommand per pipeline step.

Experiment settings come from an optional ``key = value`` file (``--config``)
overridden by explicit flags.  Every command that writes a checkpoint also
writes the resolved settings next to it as ``<checkpoint>.cfg``.

Exit codes: 0 success, 2 contract or config error, 3 format error,
4 invariant breach.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from dataclasses import replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import config as kvconfig
from . import pipeline as pl
from .backbone import PRESETS
from .checkpoint import Checkpoint, file_fingerprint
from .errors import ConfigError, ContractError, FormatError, PromptMILError, StalenessError
from .metrics import MetricsRecord, read_csv, write_csv
from .rps import read_manifest, write_manifest
from .synthdata import CorpusSpec, generate_corpus, read_bags, read_features, read_source, write_features

log = logging.getLogger("promptmil")

BACKBONE_COPY = "backbone.ckpt"


# ---------------------------------------------------------------------------
# argument helpers


def parse_int_list(text: str) -> List[int]:
    """``"1..5"`` or ``"4,8,16"`` (ranges and lists may be mixed)."""
    out: List[int] = []
    for part in text.replace(" ", "").split(","):
        if not part:
            continue
        try:
            if ".." in part:
                lo, hi = part.split("..", 1)
                out.extend(range(int(lo), int(hi) + 1))
            else:
                out.append(int(part))
        except ValueError:
            raise ConfigError(f"cannot parse integer list {text!r}") from None
    if not out:
        raise ConfigError(f"empty integer list {text!r}")
    return out


# flag name -> ExperimentConfig field
_CFG_FLAGS = {
    "preset": "preset", "seed": "seed", "epochs": "epochs", "lr": "lr", "weight_decay": "weight_decay",
    "k": "K", "mil_init": "mil_init", "mil_hidden": "mil_hidden", "prompt_sites": "prompt_sites",
    "pretrain_epochs": "pretrain_epochs", "pretrain_lr": "pretrain_lr", "stage1_epochs": "stage1_epochs",
}


def resolve_config(args, **fixed) -> pl.ExperimentConfig:
    values: Dict[str, str] = {}
    if getattr(args, "config", None):
        values.update(kvconfig.read_kv(args.config))
    for flag, key in _CFG_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = ",".join(str(s) for s in v) if isinstance(v, list) else str(v)
    for k, v in fixed.items():
        values[k] = str(v)
    return pl.ExperimentConfig.from_kv(values)


def _write_resolved(ckpt_path: str, cfg: pl.ExperimentConfig, **extra) -> None:
    values = dict(cfg.as_dict())
    values.update(extra)
    kvconfig.write_kv(ckpt_path + ".cfg", values)


def _save(ckpt: Checkpoint, path: str, cfg: pl.ExperimentConfig, **extra) -> str:
    digest = ckpt.save(path)
    _write_resolved(path, cfg, **extra)
    log.info("wrote %s (sha256 %s)", path, digest[:12])
    return digest


def _load_backbone(path: str) -> Checkpoint:
    ck = Checkpoint.load(path)
    if ck.stage != "backbone":
        raise ContractError(f"{path}: expected a backbone checkpoint, found stage {ck.stage!r}")
    return ck


def _load_mil(path: str) -> Checkpoint:
    ck = Checkpoint.load(path)
    if ck.stage != "mil":
        raise ContractError(f"{path}: expected a stage-I MIL checkpoint, found stage {ck.stage!r}")
    return ck


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> None:
    spec = CorpusSpec.from_file(args.spec) if args.spec else CorpusSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    bags, source = generate_corpus(spec, args.out)
    counts = {k: len(v) for k, v in bags.items()}
    print(f"corpus {args.out}: {counts} bags, {len(source[1])} source patches")


def cmd_pretrain(args) -> None:
    cfg = resolve_config(args)
    source = read_source(args.corpus)
    ck = pl.pretrain(source, cfg)
    _save(ck, args.out, cfg, corpus=args.corpus)
    print(f"source train acc {ck.metrics['train_acc']:.4f}  val acc {ck.metrics['val_acc']:.4f}")


def cmd_extract(args) -> None:
    backbone = _load_backbone(args.backbone)
    bags = read_bags(args.corpus)
    bcfg = pl.BackboneConfig.from_dict(backbone.extra["backbone"])
    fp = backbone.fingerprint()
    feats = pl.extract_bag_features(bags, pl.backbone_params(backbone), bcfg, fp)
    write_features(feats, args.out, fp)
    # keep the extractor with its features so later stages can rebuild full checkpoints
    shutil.copyfile(args.backbone, os.path.join(args.out, BACKBONE_COPY))
    print(f"features {args.out}: {sum(len(v) for v in feats.values())} bags, extractor {fp[:12]}")


def _features_and_backbone(featdir: str):
    feats, fp = read_features(featdir)
    path = os.path.join(featdir, BACKBONE_COPY)
    backbone = _load_backbone(path)
    if backbone.fingerprint() != fp:
        raise StalenessError(f"{featdir}: features were produced by extractor {fp[:12]}, "
                             f"stored backbone is {backbone.fingerprint()[:12]}")
    return feats, backbone


def cmd_train_mil(args) -> None:
    cfg = resolve_config(args, method="baseline")
    feats, backbone = _features_and_backbone(args.features)
    ck, _ = pl.stage1_train_mil({}, backbone, cfg, features=feats)
    _save(ck, args.out, cfg, features=args.features)
    print(f"stage I: best epoch {ck.epoch}, val auc {_fmt(ck.metrics.get('val_auc'))}")


def cmd_select(args) -> None:
    feats, fp = read_features(args.features)
    mil = _load_mil(args.mil)
    if mil.extra.get("extractor_fingerprint") != fp:
        raise StalenessError(f"{args.mil} was trained on features from a different extractor")
    sels = pl.stage2_select(feats, mil, args.k)
    margin = pl.selection_margin(sels)
    meta = {"K": args.k, "mil_checkpoint": args.mil, "mil_sha256": file_fingerprint(args.mil),
            "mil_epoch": mil.epoch, "selection_checkpoint": "best-validation", "mean_margin": round(margin, 8)}
    write_manifest(sels, args.out, meta)
    n = sum(len(v) for v in sels.values())
    print(f"selected top-{args.k} patches for {n} bags; mean kept-over-dropped margin {margin:.6f}")


def _stage3_inputs(args):
    bags = read_bags(args.corpus)
    backbone = _load_backbone(args.backbone)
    sels, meta = read_manifest(args.manifest)
    mil_path = args.mil or meta.get("mil_checkpoint")
    if not mil_path:
        raise ConfigError("no stage-I checkpoint: pass --mil or use a manifest that records one")
    mil = _load_mil(mil_path)
    if "mil_sha256" in meta and file_fingerprint(mil_path) != meta["mil_sha256"]:
        raise StalenessError(f"{mil_path} changed since {args.manifest} was written")
    if mil.extra.get("extractor_fingerprint") != backbone.fingerprint():
        raise StalenessError(f"{mil_path} was trained on features from a different backbone")
    return bags, backbone, sels, mil, meta


def cmd_prompt_tune(args) -> None:
    bags, backbone, sels, mil, meta = _stage3_inputs(args)
    cfg = resolve_config(args, method="rps_pt", K=meta.get("K", 16))
    ck = pl.stage3_prompt_tune(bags, sels, backbone, mil, cfg)
    _save(ck, args.out, cfg, manifest=args.manifest)
    print(f"rps_pt: best epoch {ck.epoch}, val auc {_fmt(ck.metrics.get('val_auc'))}, "
          f"trainable params {pl.trainable_count(ck)}; frozen backbone verified unchanged")


def cmd_finetune(args) -> None:
    bags, backbone, sels, mil, meta = _stage3_inputs(args)
    cfg = resolve_config(args, method="rps_ft", K=meta.get("K", 16))
    ck = pl.stage3_finetune_all(bags, sels, backbone, mil, cfg)
    _save(ck, args.out, cfg, manifest=args.manifest)
    print(f"rps_ft: best epoch {ck.epoch}, val auc {_fmt(ck.metrics.get('val_auc'))}, "
          f"trainable params {pl.trainable_count(ck)}")


def cmd_eval(args) -> None:
    ck = Checkpoint.load(args.checkpoint)
    if ck.stage == "backbone":
        raise ContractError(f"{args.checkpoint}: a bare backbone has no classifier to evaluate")
    bags = read_bags(args.corpus, splits=[args.split])
    rec = pl.evaluate(ck, bags, args.split, use_prompts=not args.no_prompts, prompt_override=args.prompt_override)
    if args.csv:
        write_csv([rec], args.csv, append=True)
    print(f"{rec.method} {rec.split}: auc {_fmt(rec.auc)}  f1 {rec.f1:.4f}  acc {rec.acc:.4f}  n {rec.n_bags}")


def cmd_ablate(args) -> None:
    cfg = resolve_config(args)
    bags = read_bags(args.corpus)
    source = read_source(args.corpus)
    values = parse_int_list(args.values)
    seeds = parse_int_list(args.seeds)
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)

    def on_cell(value, seed, sels, ck):
        if args.out_dir:
            stem = os.path.join(args.out_dir, f"{args.axis}{value}-seed{seed}")
            write_manifest(sels, stem + ".selection.json", {"K": ck.extra.get("K"), "seed": seed})
            _save(ck, stem + ".ckpt", replace(cfg, seed=seed), axis=args.axis, value=value)
        log.info("%s=%s seed=%s done", args.axis, value, seed)

    records = pl.ablate(bags, source, args.axis, values, seeds, cfg, on_cell)
    write_csv(records, args.csv)
    print(f"wrote {len(records)} rows to {args.csv}")


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


def summarize(rows: Sequence[dict]) -> List[dict]:
    """Mean and sample std of each metric per (split, method, preset, K, sites) group."""
    groups: Dict[tuple, List[dict]] = {}
    for r in rows:
        key = (r["split"], r["method"], r["backbone_preset"], r["K"], r["prompt_sites"])
        groups.setdefault(key, []).append(r)
    out = []
    for key in sorted(groups):
        rs = groups[key]
        entry = dict(zip(("split", "method", "backbone_preset", "K", "prompt_sites"), key))
        entry["n_runs"] = len(rs)
        for m in ("auc", "f1", "acc"):
            vals = [r[m] for r in rs if r[m] is not None]
            entry[m] = (float(np.mean(vals)), float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0) if vals else None
        out.append(entry)
    return out


def overfit_gap(rows: Sequence[dict]) -> Optional[dict]:
    """Mean validation-minus-test AUC per method, paired by seed, for rps_ft and rps_pt."""
    gaps = {}
    for method in ("rps_ft", "rps_pt"):
        by_seed: Dict[str, dict] = {}
        for r in rows:
            if r["method"] == method and r["auc"] is not None:
                by_seed.setdefault(r["seed"], {})[r["split"]] = r["auc"]
        diffs = [d["val"] - d["test"] for d in by_seed.values() if "val" in d and "test" in d]
        if not diffs:
            return None
        gaps[method] = float(np.mean(diffs))
    gaps["holds"] = gaps["rps_ft"] > gaps["rps_pt"]
    return gaps


def format_report(rows: Sequence[dict]) -> str:
    lines = []
    head = f"{'split':<6} {'method':<9} {'preset':<14} {'K':>3} {'sites':<12} {'runs':>4}  " \
           f"{'AUC':>15}  {'F1':>15}  {'Acc':>15}"
    lines.append(head)
    lines.append("-" * len(head))
    for e in summarize(rows):
        cells = []
        for m in ("auc", "f1", "acc"):
            cells.append("n/a".rjust(15) if e[m] is None else f"{e[m][0]:.4f} ± {e[m][1]:.4f}".rjust(15))
        lines.append(f"{e['split']:<6} {e['method']:<9} {e['backbone_preset']:<14} {e['K'] or '-':>3} "
                     f"{e['prompt_sites'] or '-':<12} {e['n_runs']:>4}  " + "  ".join(cells))
    gap = overfit_gap(rows)
    if gap is not None:
        verdict = "PASS" if gap["holds"] else "FAIL"
        lines.append("")
        lines.append(f"overfitting check (soft): val-test AUC gap rps_ft {gap['rps_ft']:+.4f} vs "
                     f"rps_pt {gap['rps_pt']:+.4f} -> {verdict}")
    return "\n".join(lines)


def cmd_report(args) -> None:
    rows = read_csv(args.csv)
    if not rows:
        raise FormatError(f"{args.csv}: no metric rows")
    print(format_report(rows))


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="promptmil", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    def cfg_flags(sp, training=True):
        sp.add_argument("--config", help="key = value experiment settings file")
        sp.add_argument("--seed", type=int)
        if training:
            sp.add_argument("--epochs", type=int)
            sp.add_argument("--lr", type=float)
            sp.add_argument("--weight-decay", type=float)

    s = sub.add_parser("gen-data", help="write a synthetic corpus")
    s.add_argument("--spec", help="key = value corpus spec file (defaults if omitted)")
    s.add_argument("--seed", type=int, help="override the spec seed")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("pretrain-backbone", help="supervised source-domain pretraining")
    s.add_argument("--corpus", required=True)
    s.add_argument("--preset", choices=sorted(PRESETS))
    cfg_flags(s, training=False)
    s.add_argument("--pretrain-epochs", type=int)
    s.add_argument("--pretrain-lr", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("extract", help="cache frozen features of every patch")
    s.add_argument("--corpus", required=True)
    s.add_argument("--backbone", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("train-mil", help="stage I: MIL classifier on cached features")
    s.add_argument("--features", required=True)
    cfg_flags(s)
    s.add_argument("--mil-hidden", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_mil)

    s = sub.add_parser("select", help="stage II: top-K representative patches")
    s.add_argument("--features", required=True)
    s.add_argument("--mil", required=True)
    s.add_argument("--k", type=int, default=16)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_select)

    for name, func, helptext in (("prompt-tune", cmd_prompt_tune, "stage III: tune prompts + MIL (rps_pt)"),
                                 ("finetune", cmd_finetune, "stage III baseline: tune extractor + MIL (rps_ft)")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--corpus", required=True)
        s.add_argument("--backbone", required=True)
        s.add_argument("--manifest", required=True)
        s.add_argument("--mil", help="stage-I checkpoint (default: the one recorded in the manifest)")
        s.add_argument("--mil-init", choices=("warm", "fresh"))
        cfg_flags(s)
        s.add_argument("--preset")
        if name == "prompt-tune":
            s.add_argument("--prompt-sites", type=parse_int_list)
        s.add_argument("--out", required=True)
        s.set_defaults(func=func)

    s = sub.add_parser("eval", help="bag-level metrics of a checkpoint on one split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--csv", help="append a metrics row to this CSV")
    s.add_argument("--no-prompts", action="store_true", help="evaluate without prompt blocks")
    s.add_argument("--prompt-override", type=float, help="force every prompt vector to this constant")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="K or prompt-site-count sweep of rps_pt")
    s.add_argument("--corpus", required=True)
    s.add_argument("--axis", choices=("k", "sites"), required=True)
    s.add_argument("--values", required=True, help="e.g. 4,8,16,32,64 or 0..2")
    s.add_argument("--seeds", default="1..5")
    s.add_argument("--csv", required=True)
    s.add_argument("--out-dir", help="also keep per-cell checkpoints and manifests here")
    cfg_flags(s)
    s.add_argument("--preset")
    s.add_argument("--k", type=int)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("report", help="method x metric table from a metrics CSV")
    s.add_argument("--csv", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except PromptMILError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())

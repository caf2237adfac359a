"""Representative patch selection: keep the top-K attention-ranked patches."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import ContractError, FormatError
from .mil import attention_scores
from .synthdata import FeatureBag, PatchBag

MANIFEST_VERSION = 1


@dataclass
class Selection:
    bag_id: str
    label: int
    K_requested: int
    kept_indices: List[int]
    scores: List[float]

    @property
    def kept_scores(self) -> List[float]:
        return [self.scores[i] for i in self.kept_indices]

    def to_record(self) -> dict:
        return {
            "bag_id": self.bag_id,
            "label": int(self.label),
            "K_requested": int(self.K_requested),
            "kept_indices": [int(i) for i in self.kept_indices],
            "kept_scores": [float(s) for s in self.kept_scores],
        }


def top_k(scores: Sequence[float], k: int) -> List[int]:
    """Indices of the ``k`` largest scores, ascending; ties go to the smaller index."""
    if k < 1:
        raise ContractError("K must be >= 1")
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ContractError("cannot select from an empty bag")
    order = np.argsort(-s, kind="stable")
    return sorted(int(i) for i in order[:k])


def select_representatives(bag: FeatureBag, mil, K: int) -> Selection:
    alphas = attention_scores(bag.features, mil).data
    return Selection(bag.bag_id, bag.label, K, top_k(alphas, K), [float(a) for a in alphas])


def materialize_selected_bag(selection: Selection, raw_bag: PatchBag) -> PatchBag:
    idx = list(selection.kept_indices)
    if not idx:
        raise ContractError(f"empty selection for bag {selection.bag_id}")
    n = raw_bag.patches.shape[0]
    if any(i < 0 or i >= n for i in idx):
        raise ContractError(f"selection index out of range for bag {raw_bag.bag_id} ({n} patches)")
    truth = None if raw_bag.instance_truth is None else [raw_bag.instance_truth[i] for i in idx]
    return PatchBag(raw_bag.bag_id, raw_bag.label, raw_bag.patches[idx].copy(), truth,
                    source_bag=raw_bag.bag_id, source_indices=idx)


def write_manifest(selections: Dict[str, List[Selection]], path: str, meta: Optional[dict] = None) -> None:
    doc = {
        "format_version": MANIFEST_VERSION,
        "meta": meta or {},
        "splits": {split: [s.to_record() for s in sels] for split, sels in sorted(selections.items())},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_manifest(path: str):
    """Return ``(selections_by_split, meta)``."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable selection manifest ({exc})") from None
    if doc.get("format_version") != MANIFEST_VERSION:
        raise FormatError(f"{path}: unsupported manifest version {doc.get('format_version')!r}")
    out = {}
    for split, recs in doc["splits"].items():
        sels = []
        for r in recs:
            scores = {i: s for i, s in zip(r["kept_indices"], r["kept_scores"])}
            n = max(r["kept_indices"]) + 1 if r["kept_indices"] else 0
            full = [scores.get(i, float("nan")) for i in range(n)]
            sels.append(Selection(r["bag_id"], r["label"], r["K_requested"], list(r["kept_indices"]), full))
        out[split] = sels
    return out, doc.get("meta", {})

"""Seeded synthetic corpus: source patches for pretraining and shifted target MIL bags.

Every patch is an i.i.d. gaussian texture.  "Tumour" (class B) patches add
``delta`` on a fixed 2x2 motif in each channel.  Target patches pass through
a per-channel affine shift ``x -> gain * x + offset`` that the source patches
never see.

On disk a corpus directory holds::

    manifest.json           splits, labels, patch counts, spec echo
    bags/<bag_id>.bin       PMILBAG1 blobs (source set: bags/source.bin)
    truth/<bag_id>.json     per-patch instance flags (generator ground truth)
    source_labels.json      per-patch labels of the source set
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, FormatError
from .numerics import TRAIN_DTYPE, Rng

BAG_MAGIC = b"PMILBAG1"
FEAT_MAGIC = b"PMILFEA1"
FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")


@dataclass
class PatchBag:
    bag_id: str
    label: int
    patches: np.ndarray  # [n, C, H, W] float32
    instance_truth: Optional[List[int]] = None
    source_bag: Optional[str] = None
    source_indices: Optional[List[int]] = None

    def __len__(self) -> int:
        return self.patches.shape[0]


@dataclass
class FeatureBag:
    bag_id: str
    label: int
    features: np.ndarray  # [n, L] float32
    extractor_fingerprint: str = ""

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class CorpusSpec:
    num_train: int = 40
    num_val: int = 10
    num_test: int = 20
    patches_per_bag: int = 64
    rho: float = 0.08
    height: int = 8
    width: int = 8
    channels: int = 3
    delta: float = 0.5
    sigma: float = 0.5
    gain: Tuple[float, ...] = (1.4, 0.7, 1.0)
    offset: Tuple[float, ...] = (0.3, -0.3, 0.0)
    positive_bag_fraction: float = 0.5
    num_source: int = 512
    clamp: float = 1e3
    seed: int = 0

    def __post_init__(self):
        self.gain = tuple(float(g) for g in self.gain)
        self.offset = tuple(float(o) for o in self.offset)
        if len(self.gain) != self.channels or len(self.offset) != self.channels:
            raise ContractError("gain and offset need one value per channel")

    @property
    def positives_per_bag(self) -> int:
        return int(np.floor(self.rho * self.patches_per_bag + 0.5))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gain"] = list(self.gain)
        d["offset"] = list(self.offset)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    @classmethod
    def from_file(cls, path: str) -> "CorpusSpec":
        """Read ``key = value`` lines (``#`` comments); tuples are comma-separated."""
        from .config import read_kv

        raw = read_kv(path)
        kw = {}
        for k, v in raw.items():
            if k not in cls.__dataclass_fields__:
                raise ContractError(f"{path}: unknown corpus key {k!r}")
            typ = cls.__dataclass_fields__[k].type
            if k in ("gain", "offset"):
                kw[k] = tuple(float(x) for x in v.split(","))
            elif typ in ("int", int):
                kw[k] = int(v)
            else:
                kw[k] = float(v)
        return cls(**kw)


def motif_mask(channels: int, height: int, width: int) -> np.ndarray:
    """Boolean ``[C, H, W]`` mask with one 2x2 block per channel at a fixed place."""
    m = np.zeros((channels, height, width), dtype=bool)
    for c in range(channels):
        r0 = (1 + 2 * c) % max(height - 1, 1)
        c0 = (width - 3 - 2 * c) % max(width - 1, 1)
        m[c, r0:r0 + 2, c0:c0 + 2] = True
    return m


def _textures(rng: Rng, n: int, spec: CorpusSpec) -> np.ndarray:
    shape = (n, spec.channels, spec.height, spec.width)
    return rng.gaussian(0.0, spec.sigma, int(np.prod(shape))).reshape(shape)


def _add_motif(x: np.ndarray, spec: CorpusSpec) -> np.ndarray:
    return x + spec.delta * motif_mask(spec.channels, spec.height, spec.width)


def _shift(x: np.ndarray, spec: CorpusSpec) -> np.ndarray:
    g = np.asarray(spec.gain)[:, None, None]
    o = np.asarray(spec.offset)[:, None, None]
    return np.clip(g * x + o, -spec.clamp, spec.clamp)


def gen_source_patches(spec: CorpusSpec, n: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """``n`` unshifted patches, half plain (label 0) and half with the motif (label 1), shuffled."""
    n = spec.num_source if n is None else n
    if n % 2:
        raise ContractError(f"source set size must be even, got {n}")
    rng = Rng(spec.seed, "data/source")
    x = _textures(rng, n, spec)
    labels = np.repeat(np.array([0, 1], dtype=np.int64), n // 2)
    x[labels == 1] = _add_motif(x[labels == 1], spec)
    order = np.asarray(rng.permutation(n)) if n > 1 else np.arange(n)
    return x[order].astype(TRAIN_DTYPE), labels[order]


def gen_target_bags(spec: CorpusSpec) -> Dict[str, List[PatchBag]]:
    n = spec.patches_per_bag
    k_pos = spec.positives_per_bag
    if not 0 < spec.rho <= 1 or k_pos < 1 or k_pos > n:
        raise ContractError(f"rho={spec.rho} gives {k_pos} positives in a bag of {n}")
    out = {}
    for split, count in zip(SPLITS, (spec.num_train, spec.num_val, spec.num_test)):
        rng = Rng(spec.seed, f"data/{split}")
        n_pos = int(round(count * spec.positive_bag_fraction))
        labels = [1] * n_pos + [0] * (count - n_pos)
        if count > 1:
            labels = [labels[i] for i in rng.permutation(count)]
        bags = []
        for b, label in enumerate(labels):
            x = _textures(rng, n, spec)
            truth = [0] * n
            if label:
                for i in rng.permutation(n)[:k_pos]:
                    truth[i] = 1
                pos = np.asarray(truth, dtype=bool)
                x[pos] = _add_motif(x[pos], spec)
            x = _shift(x, spec).astype(TRAIN_DTYPE)
            bags.append(PatchBag(f"{split}-{b:04d}", label, x, truth))
        out[split] = bags
    return out


# ---------------------------------------------------------------------------
# binary blobs


def _write_blob(path: str, magic: bytes, arr: np.ndarray) -> None:
    data = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<" + "I" * data.ndim, *data.shape))
        fh.write(data.tobytes())


def _read_blob(path: str, magic: bytes, ndim: int) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc.strerror})") from None
    head = len(magic) + 4 * ndim
    if len(raw) < head:
        raise FormatError(f"{path}: truncated header")
    if raw[:len(magic)] != magic:
        raise FormatError(f"{path}: bad magic {raw[:len(magic)]!r}, expected {magic!r}")
    dims = struct.unpack("<" + "I" * ndim, raw[len(magic):head])
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) - head != 4 * count:
        raise FormatError(f"{path}: expected {4 * count} data bytes, found {len(raw) - head}")
    return np.frombuffer(raw, dtype="<f4", offset=head).astype(np.float32).reshape(dims)


def _dump_json(obj, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _load_json(path: str):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None


def write_bags(bags: Dict[str, List[PatchBag]], path: str, spec: Optional[CorpusSpec] = None,
               source: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> None:
    os.makedirs(os.path.join(path, "bags"), exist_ok=True)
    os.makedirs(os.path.join(path, "truth"), exist_ok=True)
    manifest = {"format_version": FORMAT_VERSION, "spec": spec.to_dict() if spec else None, "splits": {}}
    for split, items in bags.items():
        recs = []
        for bag in items:
            _write_blob(os.path.join(path, "bags", f"{bag.bag_id}.bin"), BAG_MAGIC, bag.patches)
            if bag.instance_truth is not None:
                _dump_json({"bag_id": bag.bag_id, "instance_truth": list(bag.instance_truth)},
                           os.path.join(path, "truth", f"{bag.bag_id}.json"))
            recs.append({"bag_id": bag.bag_id, "label": int(bag.label), "n_patches": len(bag)})
        manifest["splits"][split] = recs
    if source is not None:
        patches, labels = source
        _write_blob(os.path.join(path, "bags", "source.bin"), BAG_MAGIC, patches)
        _dump_json([int(v) for v in labels], os.path.join(path, "source_labels.json"))
        manifest["source"] = {"n_patches": int(len(labels))}
    _dump_json(manifest, os.path.join(path, "manifest.json"))


def read_manifest(path: str) -> dict:
    m = _load_json(os.path.join(path, "manifest.json"))
    if not isinstance(m, dict) or m.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{os.path.join(path, 'manifest.json')}: unsupported format version")
    return m


def read_bags(path: str, splits: Optional[Sequence[str]] = None,
              with_truth: bool = False) -> Dict[str, List[PatchBag]]:
    """Load bag splits.  Instance truth is only read when asked for."""
    m = read_manifest(path)
    out = {}
    for split, recs in m["splits"].items():
        if splits is not None and split not in splits:
            continue
        items = []
        for r in recs:
            x = _read_blob(os.path.join(path, "bags", f"{r['bag_id']}.bin"), BAG_MAGIC, 4)
            if x.shape[0] != r["n_patches"]:
                raise FormatError(f"{path}: bag {r['bag_id']} has {x.shape[0]} patches, manifest says {r['n_patches']}")
            truth = read_truth(path, r["bag_id"]) if with_truth else None
            items.append(PatchBag(r["bag_id"], int(r["label"]), x, truth))
        out[split] = items
    return out


def read_truth(path: str, bag_id: str) -> List[int]:
    return list(_load_json(os.path.join(path, "truth", f"{bag_id}.json"))["instance_truth"])


def read_source(path: str) -> Tuple[np.ndarray, np.ndarray]:
    m = read_manifest(path)
    if "source" not in m:
        raise FormatError(f"{path}: corpus has no source patch set")
    x = _read_blob(os.path.join(path, "bags", "source.bin"), BAG_MAGIC, 4)
    labels = np.asarray(_load_json(os.path.join(path, "source_labels.json")), dtype=np.int64)
    if labels.shape != (x.shape[0],):
        raise FormatError(f"{path}: source label count does not match patches")
    return x, labels


def read_spec(path: str) -> Optional[CorpusSpec]:
    s = read_manifest(path).get("spec")
    return CorpusSpec.from_dict(s) if s else None


def generate_corpus(spec: CorpusSpec, path: Optional[str] = None):
    """Generate source patches and target bags; write them if ``path`` is given."""
    bags = gen_target_bags(spec)
    source = gen_source_patches(spec)
    if path is not None:
        write_bags(bags, path, spec, source)
    return bags, source


# ---------------------------------------------------------------------------
# feature store


def write_features(bags: Dict[str, List[FeatureBag]], path: str, fingerprint: str) -> None:
    os.makedirs(os.path.join(path, "feats"), exist_ok=True)
    manifest = {"format_version": FORMAT_VERSION, "extractor_fingerprint": fingerprint, "splits": {}}
    for split, items in bags.items():
        recs = []
        for fb in items:
            if fb.extractor_fingerprint != fingerprint:
                raise ContractError(f"feature bag {fb.bag_id} was produced by another extractor")
            _write_blob(os.path.join(path, "feats", f"{fb.bag_id}.bin"), FEAT_MAGIC, fb.features)
            recs.append({"bag_id": fb.bag_id, "label": int(fb.label), "n_patches": len(fb)})
        manifest["splits"][split] = recs
    _dump_json(manifest, os.path.join(path, "manifest.json"))


def read_features(path: str) -> Tuple[Dict[str, List[FeatureBag]], str]:
    m = _load_json(os.path.join(path, "manifest.json"))
    if not isinstance(m, dict) or m.get("format_version") != FORMAT_VERSION or "extractor_fingerprint" not in m:
        raise FormatError(f"{os.path.join(path, 'manifest.json')}: not a feature store")
    fp = m["extractor_fingerprint"]
    out = {}
    for split, recs in m["splits"].items():
        out[split] = [
            FeatureBag(r["bag_id"], int(r["label"]),
                       _read_blob(os.path.join(path, "feats", f"{r['bag_id']}.bin"), FEAT_MAGIC, 2), fp)
            for r in recs
        ]
    return out, fp

"""Binary checkpoint format.

Layout::

    PMILCKPT1\\n
    meta <json>\\n
    tensors <count>\\n
    <name> <d0,d1,...> <trainable 0|1> <byte offset>\\n     (one line per tensor)
    end\\n
    <little-endian float32 data, offsets relative to the first data byte>

The metadata JSON is written with sorted keys, so identical content always
produces identical bytes.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import numpy as np

from .errors import FormatError
from .layers import ParamSet

MAGIC = b"PMILCKPT1\n"


@dataclass
class Checkpoint:
    params: ParamSet
    stage: str
    epoch: int = 0
    metrics: Dict[str, Any] = field(default_factory=dict)
    config_fingerprint: str = ""
    extra: Dict[str, Any] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        meta = {
            "stage": self.stage,
            "epoch": int(self.epoch),
            "metrics": self.metrics,
            "config_fingerprint": self.config_fingerprint,
            "extra": self.extra,
        }
        lines = [MAGIC, b"meta " + json.dumps(meta, sort_keys=True).encode() + b"\n"]
        names = self.params.names()
        lines.append(f"tensors {len(names)}\n".encode())
        blobs = []
        offset = 0
        for n in names:
            arr = np.asarray(self.params[n], dtype="<f4")  # ascontiguousarray would turn 0-d into 1-d
            if " " in n:
                raise FormatError(f"parameter name {n!r} contains a space")
            shape = ",".join(str(s) for s in arr.shape) or "-"
            lines.append(f"{n} {shape} {int(self.params.trainable[n])} {offset}\n".encode())
            blobs.append(arr.tobytes())
            offset += arr.nbytes
        lines.append(b"end\n")
        return b"".join(lines + blobs)

    @classmethod
    def from_bytes(cls, raw: bytes, source: str = "<bytes>") -> "Checkpoint":
        if not raw.startswith(MAGIC):
            raise FormatError(f"{source}: bad checkpoint magic")
        pos = len(MAGIC)

        def line() -> str:
            nonlocal pos
            end = raw.find(b"\n", pos)
            if end < 0:
                raise FormatError(f"{source}: truncated checkpoint header")
            text = raw[pos:end].decode("utf-8")
            pos = end + 1
            return text

        try:
            head = line()
            if not head.startswith("meta "):
                raise FormatError(f"{source}: missing meta line")
            meta = json.loads(head[5:])
            kind, count = line().split()
            if kind != "tensors":
                raise FormatError(f"{source}: missing tensor index")
            index = []
            for _ in range(int(count)):
                name, shape, trainable, off = line().split()
                dims = () if shape == "-" else tuple(int(s) for s in shape.split(","))
                index.append((name, dims, trainable == "1", int(off)))
            if line() != "end":
                raise FormatError(f"{source}: missing end marker")
        except (ValueError, UnicodeDecodeError) as exc:
            raise FormatError(f"{source}: malformed checkpoint header ({exc})") from None

        data = raw[pos:]
        params = ParamSet()
        for name, dims, trainable, off in index:
            nbytes = 4 * int(np.prod(dims, dtype=np.int64))
            if off + nbytes > len(data):
                raise FormatError(f"{source}: truncated tensor data for {name}")
            arr = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=off)
            params.add(name, arr.astype(np.float32).reshape(dims), trainable)
        return cls(params=params, stage=meta["stage"], epoch=meta["epoch"], metrics=meta["metrics"],
                   config_fingerprint=meta["config_fingerprint"], extra=meta.get("extra", {}))

    def save(self, path: str) -> str:
        """Write the checkpoint and return its sha256 fingerprint."""
        raw = self.to_bytes()
        d = os.path.dirname(os.path.abspath(path))
        os.makedirs(d, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(raw)
        return hashlib.sha256(raw).hexdigest()

    @classmethod
    def load(cls, path: str) -> "Checkpoint":
        try:
            with open(path, "rb") as fh:
                raw = fh.read()
        except OSError as exc:
            raise FormatError(f"{path}: cannot read checkpoint ({exc.strerror})") from None
        return cls.from_bytes(raw, source=path)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def file_fingerprint(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()

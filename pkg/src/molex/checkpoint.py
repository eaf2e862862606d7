"""Binary checkpoint format.

Layout (little-endian)::

    b"MOLX" | u32 version | u32 n | n bytes of descriptor JSON (sorted keys, compact)
    then for every tensor, in descriptor order:
    u32 name_len | name | u8 frozen | u32 ndim | u32 dims[ndim] | f64 data
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import Encoder, ModelConfig
from .errors import FormatError
from .freeze import FreezeMask

MAGIC = b"MOLX"
VERSION = 1
_U32 = struct.Struct("<I")


@dataclass
class ModelCheckpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    frozen: dict[str, bool]
    expert_trainable: list[list[bool]]
    seed: int = 0
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_encoder(cls, enc: Encoder, mask: FreezeMask | None = None, seed: int = 0,
                     extra: dict | None = None) -> ModelCheckpoint:
        mask = mask if mask is not None else FreezeMask.molex(enc)
        tensors = {n: p.data.copy() for n, p in enc.named_parameters()}
        return cls(enc.cfg, tensors, {n: not mask.is_trainable(n) for n in tensors},
                   [[e.trainable for e in m.experts] for m in enc.molex_layers], seed, dict(extra or {}))

    def descriptor(self) -> dict:
        return {
            "format_version": VERSION,
            "model": self.config.to_dict(),
            "experts_per_layer": [len(t) for t in self.expert_trainable],
            "expert_trainable": self.expert_trainable,
            "seed": self.seed,
            "tensors": list(self.tensors),
            "extra": self.extra,
        }

    def to_bytes(self) -> bytes:
        desc = json.dumps(self.descriptor(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        out = bytearray(MAGIC)
        out += _U32.pack(VERSION)
        out += _U32.pack(len(desc))
        out += desc
        for name, arr in self.tensors.items():
            raw = name.encode("utf-8")
            out += _U32.pack(len(raw)) + raw
            out += bytes([1 if self.frozen[name] else 0])
            out += _U32.pack(arr.ndim)
            for n in arr.shape:
                out += _U32.pack(n)
            out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
        return bytes(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> ModelCheckpoint:
        r = _Reader(blob)
        if r.take(4, "magic") != MAGIC:
            raise FormatError("not a MoLEx checkpoint (bad magic)", offset=0)
        version = r.u32("version")
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", offset=4)
        n = r.u32("descriptor length")
        at = r.pos
        try:
            desc = json.loads(r.take(n, "descriptor").decode("utf-8"))
            config = ModelConfig.from_dict(desc["model"])
            names = list(desc["tensors"])
            trainable = [[bool(x) for x in row] for row in desc["expert_trainable"]]
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"corrupt descriptor: {exc}", offset=at) from None
        tensors, frozen = {}, {}
        for expected in names:
            at = r.pos
            name = r.take(r.u32("name length"), "tensor name").decode("utf-8", errors="replace")
            if name != expected:
                raise FormatError(f"tensor {name!r} where descriptor lists {expected!r}", offset=at)
            flag = r.take(1, "freeze flag")[0]
            ndim = r.u32("ndim")
            shape = tuple(r.u32("dim") for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(r.take(8 * count, f"data of {name}"), dtype="<f8").reshape(shape)
            tensors[name] = data.astype(np.float64)
            frozen[name] = bool(flag)
        if r.pos != len(blob):
            raise FormatError(f"{len(blob) - r.pos} trailing bytes after last tensor", offset=r.pos)
        return cls(config, tensors, frozen, trainable, int(desc.get("seed", 0)), desc.get("extra", {}))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> ModelCheckpoint:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"missing checkpoint {p}")
        return cls.from_bytes(p.read_bytes())

    def build(self) -> Encoder:
        enc = Encoder.build(self.config, self.seed)
        enc.grow_to([len(t) for t in self.expert_trainable])
        for mod, flags in zip(enc.molex_layers, self.expert_trainable):
            for e, flag in zip(mod.experts, flags):
                e.trainable = flag
        enc.load_state(self.tensors)
        return enc

    def mask(self) -> FreezeMask:
        return FreezeMask({n for n, f in self.frozen.items() if not f})


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"truncated checkpoint while reading {what}", offset=self.pos)
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]


def save_encoder(enc: Encoder, path, mask: FreezeMask | None = None, seed: int = 0, extra=None) -> None:
    ModelCheckpoint.from_encoder(enc, mask, seed, extra).save(path)


def load_encoder(path) -> tuple[Encoder, ModelCheckpoint]:
    ckpt = ModelCheckpoint.load(path)
    return ckpt.build(), ckpt

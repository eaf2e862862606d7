"""Synthetic bonafide/spoof feature sequences and their on-disk format.

Bonafide utterances are smooth multi-sinusoid trajectories with jitter on top of
a per-domain channel offset. Spoofed ones are drawn the same way and then get
the domain's artifact, scaled by ``1 - difficulty``:

* ``A``: an alternating-sign buzz added to every frame,
* ``B``: block quantization, each group of adjacent feature dims pulled to its mean,
* ``C``: an energy notch over a band of feature dims.

On disk a dataset is a directory with ``features.bin`` (magic ``MOLD``, u32
version, then float32 frames) and ``manifest.jsonl`` (one line per utterance).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

DOMAINS = ("A", "B", "C")
LABELS = ("bonafide", "spoof")
MAGIC = b"MOLD"
VERSION = 1
_HEADER = struct.Struct("<4sI")

BUZZ_AMP = 0.6
QUANT_BLOCK = 4
JITTER = 0.05
N_TONES = 3


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    samples_per_class: int = 100
    frames: int = 24
    d_in: int = 16
    domain: str = "A"
    difficulty: float = 0.3

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ConfigError(f"domain must be one of {DOMAINS}, got {self.domain!r}")
        if not 0.0 <= self.difficulty <= 1.0:
            raise ConfigError(f"difficulty must lie in [0, 1], got {self.difficulty}")
        if self.frames < 1 or self.d_in < 4 or self.samples_per_class < 1:
            raise ConfigError("need frames >= 1, d_in >= 4, samples_per_class >= 1")


@dataclass
class Utterance:
    id: str
    features: np.ndarray
    label: str
    domain: str

    @property
    def frames(self) -> int:
        return self.features.shape[0]

    @property
    def is_bonafide(self) -> bool:
        return self.label == "bonafide"


class Dataset(list):
    """A list of utterances with batching helpers."""

    @property
    def d_in(self) -> int:
        return self[0].features.shape[1]

    def labels(self) -> np.ndarray:
        """Class indices, 0 = bonafide, 1 = spoof."""
        return np.array([0 if u.is_bonafide else 1 for u in self], dtype=np.int64)

    def features(self) -> np.ndarray:
        return np.stack([u.features for u in self])

    def subset(self, idx) -> Dataset:
        return Dataset(self[int(i)] for i in idx)

    def by_domain(self, domain: str) -> Dataset:
        return Dataset(u for u in self if u.domain == domain)

    def __add__(self, other) -> Dataset:
        return Dataset(list.__add__(self, other))


def notch_band(d_in: int) -> slice:
    q = d_in // 4
    return slice(q, 2 * q)


def channel_offset(domain: str, d_in: int) -> np.ndarray:
    """Fixed per-domain offset: a property of the domain, not of any spec seed."""
    rng = np.random.default_rng(1000 + DOMAINS.index(domain))
    return rng.normal(0.0, 0.5, size=d_in)


def _bonafide(rng: np.random.Generator, frames: int, d_in: int, offset: np.ndarray) -> np.ndarray:
    t = np.arange(frames)[:, None, None]
    freq = rng.uniform(0.02, 0.08, size=(1, N_TONES, d_in))
    phase = rng.uniform(0.0, 2 * np.pi, size=(1, N_TONES, d_in))
    amp = rng.uniform(0.2, 0.5, size=(1, N_TONES, d_in))
    x = (amp * np.sin(2 * np.pi * freq * t + phase)).sum(axis=1)
    return x + offset + rng.normal(0.0, JITTER, size=(frames, d_in))


def apply_artifact(x: np.ndarray, domain: str, magnitude: float) -> np.ndarray:
    x = x.copy()
    if domain == "A":
        sign = np.where(np.arange(x.shape[0]) % 2 == 0, 1.0, -1.0)[:, None]
        x += magnitude * BUZZ_AMP * sign
    elif domain == "B":
        n = (x.shape[1] // QUANT_BLOCK) * QUANT_BLOCK
        blocks = x[:, :n].reshape(x.shape[0], -1, QUANT_BLOCK)
        means = blocks.mean(axis=2, keepdims=True)
        x[:, :n] = ((1.0 - magnitude) * blocks + magnitude * means).reshape(x.shape[0], n)
    else:
        band = notch_band(x.shape[1])
        x[:, band] *= 1.0 - magnitude
    return x


def generate(spec: SynthSpec) -> Dataset:
    """Deterministic in ``spec``: bonafide then spoof interleaved, one rng per utterance."""
    offset = channel_offset(spec.domain, spec.d_in)
    magnitude = 1.0 - spec.difficulty
    dom = DOMAINS.index(spec.domain)
    out = Dataset()
    for idx in range(2 * spec.samples_per_class):
        rng = np.random.default_rng([spec.seed, dom, idx])
        label = LABELS[idx % 2]
        x = _bonafide(rng, spec.frames, spec.d_in, offset)
        if label == "spoof":
            x = apply_artifact(x, spec.domain, magnitude)
        # stored as float32 on disk; round now so a save/load round trip is exact
        x = x.astype(np.float32).astype(np.float64)
        out.append(Utterance(f"{spec.domain}{spec.seed}-{idx:05d}", x, label, spec.domain))
    return out


def split(dataset: Dataset, dev_fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Label-stratified random split into (train, dev)."""
    rng = np.random.default_rng(seed)
    train_idx, dev_idx = [], []
    labels = np.array([u.label for u in dataset])
    for lab in LABELS:
        idx = np.flatnonzero(labels == lab)
        rng.shuffle(idx)
        n_dev = int(round(dev_fraction * idx.size))
        dev_idx.extend(idx[:n_dev])
        train_idx.extend(idx[n_dev:])
    return dataset.subset(sorted(train_idx)), dataset.subset(sorted(dev_idx))


# ---------------------------------------------------------------- artifact statistics

def artifact_stats(x: np.ndarray) -> dict[str, float]:
    """Hand-written detector statistics, one per artifact family.

    ``buzz``: energy of the alternating-sign component (A raises it).
    ``block``: spread inside feature blocks over spread across all dims (B lowers it).
    ``notch``: band energy over mean per-dim energy after centering (C lowers it).
    """
    frames = x.shape[0]
    sign = np.where(np.arange(frames) % 2 == 0, 1.0, -1.0)[:, None]
    buzz = float(np.mean((sign * x).mean(axis=0) ** 2))
    n = (x.shape[1] // QUANT_BLOCK) * QUANT_BLOCK
    blocks = x[:, :n].reshape(frames, -1, QUANT_BLOCK)
    block = float(blocks.var(axis=2).mean() / (x.var(axis=1).mean() + 1e-12))
    xc = x - x.mean(axis=0)
    energy = (xc ** 2).mean(axis=0)
    notch = float(energy[notch_band(x.shape[1])].mean() / (energy.mean() + 1e-12))
    return {"buzz": buzz, "block": block, "notch": notch}


# ---------------------------------------------------------------- serialization

def save(dataset: Dataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blob = bytearray(_HEADER.pack(MAGIC, VERSION))
    lines = []
    for u in dataset:
        offset = len(blob)
        blob += np.ascontiguousarray(u.features, dtype="<f4").tobytes()
        lines.append(json.dumps({"id": u.id, "label": u.label, "domain": u.domain, "offset": offset,
                                 "frames": u.frames, "dim": u.features.shape[1]}, sort_keys=True))
    (path / "features.bin").write_bytes(bytes(blob))
    (path / "manifest.jsonl").write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load(path) -> Dataset:
    path = Path(path)
    blob_path, manifest_path = path / "features.bin", path / "manifest.jsonl"
    for p in (blob_path, manifest_path):
        if not p.exists():
            raise FileNotFoundError(f"missing dataset file {p}")
    blob = blob_path.read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{blob_path}: truncated header", offset=len(blob))
    magic, version = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"{blob_path}: bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"{blob_path}: unsupported version {version}", offset=4)
    out = Dataset()
    text = manifest_path.read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        try:
            rec = json.loads(line)
            uid, label, domain = rec["id"], rec["label"], rec["domain"]
            offset, frames, dim = int(rec["offset"]), int(rec["frames"]), int(rec["dim"])
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"{manifest_path}:{lineno}: bad manifest line ({exc})") from None
        if label not in LABELS:
            raise FormatError(f"{manifest_path}:{lineno}: unknown label {label!r}")
        end = offset + 4 * frames * dim
        if offset < _HEADER.size or end > len(blob):
            raise FormatError(f"{blob_path}: utterance {uid} runs past end of file ({len(blob)} bytes)",
                              offset=min(end, len(blob)))
        feats = np.frombuffer(blob, dtype="<f4", count=frames * dim, offset=offset)
        out.append(Utterance(uid, feats.reshape(frames, dim).astype(np.float64), label, domain))
    return out


def spec_dict(spec: SynthSpec) -> dict:
    return asdict(spec)

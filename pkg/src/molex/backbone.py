"""Desk-scale speech encoder: frontend, post-LN transformer layers with MoLEx,
attentive merging over layer outputs, and an LSTM classifier.

All activations are batched as [B, T, d].
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .layer import GatingNetwork, LoRAExpert, MoLExLayer, RouterDecision, molex_forward
from .tensor import Tensor

BONAFIDE, SPOOF = 0, 1


@dataclass
class ModelConfig:
    d_in: int = 16
    d: int = 64
    heads: int = 4
    layers: int = 4
    molex_layers: int = 4
    ffn_dim: int = 256
    n_experts: int = 6
    k: int = 2
    rank: int = 8
    lstm_hidden: int = 192
    noise_enabled: bool = True
    merge_projection: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if not 0 <= self.molex_layers <= self.layers:
            raise ConfigError(f"molex_layers={self.molex_layers} must lie in 0..layers={self.layers}")
        if not 1 <= self.k <= self.n_experts:
            raise ConfigError(f"K={self.k} must lie in 1..N={self.n_experts}")
        if not 1 <= self.rank <= self.d:
            raise ConfigError(f"rank r={self.rank} must lie in 1..d={self.d}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def full_scale(cls) -> ModelConfig:
        """WavLM-Large-like dims (12 layers, 12 experts of rank 32, top-4)."""
        return cls(d_in=512, d=1024, heads=16, layers=12, molex_layers=12, ffn_dim=4096,
                   n_experts=12, k=4, rank=32, merge_projection=True)


def sinusoidal_encoding(frames: int, d: int) -> np.ndarray:
    pos = np.arange(frames)[:, None]
    div = np.exp(np.arange(0, d, 2) * (-math.log(10000.0) / d))
    pe = np.zeros((frames, d))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div[: d // 2])
    return pe


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Frontend:
    """Linear projection plus fixed sinusoidal positions; stands in for the SSL CNN."""

    def __init__(self, d_in: int, d: int, rng: np.random.Generator):
        self.w = T.parameter(_uniform(rng, d_in, (d_in, d)))
        self.b = T.parameter(np.zeros(d))

    def named_parameters(self):
        yield "W", self.w
        yield "b", self.b

    def __call__(self, x: Tensor) -> Tensor:
        return frontend(self, x)


def frontend(fe: Frontend, x: Tensor) -> Tensor:
    if x.shape[-1] != fe.w.shape[0]:
        raise ShapeError(f"frontend expects {fe.w.shape[0]} input features, got {x.shape}")
    pe = sinusoidal_encoding(x.shape[-2], fe.w.shape[1])
    return x @ fe.w + fe.b + pe


class TransformerLayer:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, with_molex: bool):
        d, f = cfg.d, cfg.ffn_dim
        self.heads = cfg.heads
        self.wq, self.wk, self.wv, self.wo = (T.parameter(_uniform(rng, d, (d, d))) for _ in range(4))
        self.bq, self.bk, self.bv, self.bo = (T.parameter(np.zeros(d)) for _ in range(4))
        self.ln1_g, self.ln1_b = T.parameter(np.ones(d)), T.parameter(np.zeros(d))
        self.w1 = T.parameter(_uniform(rng, d, (d, f)))
        self.b1 = T.parameter(np.zeros(f))
        self.w2 = T.parameter(_uniform(rng, f, (f, d)))
        self.b2 = T.parameter(np.zeros(d))
        self.ln2_g, self.ln2_b = T.parameter(np.ones(d)), T.parameter(np.zeros(d))
        self.molex: MoLExLayer | None = None
        if with_molex:
            self.molex = MoLExLayer.init(d, cfg.n_experts, cfg.k, cfg.rank, rng,
                                         ffn=self.ffn, noise_enabled=cfg.noise_enabled)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"):
            yield f"attn.{n}", getattr(self, n)
        yield "ln1.gamma", self.ln1_g
        yield "ln1.beta", self.ln1_b
        for n in ("w1", "b1", "w2", "b2"):
            yield f"ffn.{n}", getattr(self, n)
        yield "ln2.gamma", self.ln2_g
        yield "ln2.beta", self.ln2_b
        if self.molex is not None:
            for n, p in self.molex.named_parameters():
                yield f"molex.{n}", p

    def mhsa(self, h: Tensor) -> Tensor:
        b, t, d = h.shape
        nh = self.heads
        dh = d // nh

        def split(x):
            return T.transpose(T.reshape(x, (b, t, nh, dh)), (0, 2, 1, 3))

        q = split(h @ self.wq + self.bq)
        k = split(h @ self.wk + self.bk)
        v = split(h @ self.wv + self.bv)
        att = T.softmax((q @ T.transpose(k)) * (1.0 / math.sqrt(dh)), axis=-1)
        ctx = T.reshape(T.transpose(att @ v, (0, 2, 1, 3)), (b, t, d))
        return ctx @ self.wo + self.bo

    def ffn(self, phi: Tensor) -> Tensor:
        return T.gelu(phi @ self.w1 + self.b1) @ self.w2 + self.b2

    def __call__(self, h, training=False, rng=None):
        return layer_forward(self, h, training, rng)


def layer_forward(layer: TransformerLayer, h: Tensor, training: bool = False,
                  rng: np.random.Generator | None = None) -> tuple[Tensor, RouterDecision | None]:
    """phi = LN(h + MHSA(h)); phi' = MoLEx(phi) + FFN(phi); out = LN(phi + phi')."""
    if h.ndim != 3:
        raise ShapeError(f"layer input must be [B, T, d], got {h.shape}")
    phi = T.layer_norm(h + layer.mhsa(h), layer.ln1_g, layer.ln1_b)
    decision = None
    if layer.molex is not None:
        phi_prime, decision = molex_forward(layer.molex, phi, training, rng)
    else:
        phi_prime = layer.ffn(phi)
    return T.layer_norm(phi + phi_prime, layer.ln2_g, layer.ln2_b), decision


class AttentiveMerge:
    """Softmax-over-layers weighting scored by a learned query against mean-pooled layers."""

    def __init__(self, d: int, n_layers: int, rng: np.random.Generator, projection: bool = False):
        self.q = T.parameter(np.zeros(d))
        self.proj_w: list[Tensor] = []
        self.proj_b: list[Tensor] = []
        if projection:
            self.proj_w = [T.parameter(np.eye(d) + _uniform(rng, d, (d, d)) * 0.1) for _ in range(n_layers)]
            self.proj_b = [T.parameter(np.zeros(d)) for _ in range(n_layers)]

    def named_parameters(self):
        yield "q", self.q
        for i, (w, b) in enumerate(zip(self.proj_w, self.proj_b)):
            yield f"proj.{i}.W", w
            yield f"proj.{i}.b", b

    def layer_weights(self, hs: list[Tensor]) -> Tensor:
        return attentive_merge(self, hs, return_weights=True)[1]

    def __call__(self, hs):
        return attentive_merge(self, hs)


def attentive_merge(merge: AttentiveMerge, hs: list[Tensor], return_weights: bool = False):
    """Merge L layer outputs (each [..., T, d]) into one [..., T, d] sequence."""
    if not hs:
        raise ContractError("attentive_merge needs at least one layer output")
    if merge.proj_w:
        if len(merge.proj_w) != len(hs):
            raise ShapeError(f"merge has {len(merge.proj_w)} projections for {len(hs)} layers")
        hs = [h @ w + b for h, w, b in zip(hs, merge.proj_w, merge.proj_b)]
    stacked = T.stack(hs, axis=-3)                                 # [..., L, T, d]
    pooled = T.mean(stacked, axis=-2)                              # [..., L, d]
    weights = T.softmax(T.reshape(pooled @ T.reshape(merge.q, (-1, 1)), pooled.shape[:-1]), axis=-1)
    w = T.reshape(weights, weights.shape + (1, 1))
    out = T.tsum(stacked * w, axis=-3)
    return (out, weights) if return_weights else out


class ClassifierHead:
    """Single-layer LSTM over time, last hidden state to 2 logits [bonafide, spoof]."""

    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        self.hidden = hidden
        self.w_ih = T.parameter(_uniform(rng, hidden, (d, 4 * hidden)))
        self.w_hh = T.parameter(_uniform(rng, hidden, (hidden, 4 * hidden)))
        self.b = T.parameter(np.zeros(4 * hidden))
        self.w_out = T.parameter(_uniform(rng, hidden, (hidden, 2)))
        self.b_out = T.parameter(np.zeros(2))

    def named_parameters(self):
        yield "lstm.w_ih", self.w_ih
        yield "lstm.w_hh", self.w_hh
        yield "lstm.b", self.b
        yield "out.W", self.w_out
        yield "out.b", self.b_out

    def __call__(self, merged):
        return classify(self, merged)


def classify(head: ClassifierHead, merged: Tensor) -> Tensor:
    """Logits [B, 2] (or [2] for an unbatched [T, d] input)."""
    single = merged.ndim == 2
    if single:
        merged = T.reshape(merged, (1,) + merged.shape)
    bsz, frames, _ = merged.shape
    if frames == 0:
        raise ContractError("classify needs a non-empty sequence")
    hd = head.hidden
    xw = merged @ head.w_ih + head.b                                # [B, T, 4H]
    h = Tensor(np.zeros((bsz, hd)))
    c = Tensor(np.zeros((bsz, hd)))
    for t in range(frames):
        z = xw[:, t, :] + h @ head.w_hh
        i = T.sigmoid(z[:, :hd])
        f = T.sigmoid(z[:, hd:2 * hd])
        g = T.tanh(z[:, 2 * hd:3 * hd])
        o = T.sigmoid(z[:, 3 * hd:])
        c = f * c + i * g
        h = o * T.tanh(c)
    logits = h @ head.w_out + head.b_out
    return T.reshape(logits, (2,)) if single else logits


def spoof_score(logits) -> np.ndarray:
    """Detection score, higher means more bonafide."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return arr[..., BONAFIDE] - arr[..., SPOOF]


@dataclass
class ForwardResult:
    logits: Tensor
    decisions: list[RouterDecision]
    hidden: list[Tensor]


class Encoder:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.frontend = Frontend(cfg.d_in, cfg.d, rng)
        self.layers = [TransformerLayer(cfg, rng, with_molex=i < cfg.molex_layers)
                       for i in range(cfg.layers)]
        self.merge = AttentiveMerge(cfg.d, cfg.layers, rng, cfg.merge_projection)
        self.head = ClassifierHead(cfg.d, cfg.lstm_hidden, rng)

    @classmethod
    def build(cls, cfg: ModelConfig, seed: int = 0) -> Encoder:
        return cls(cfg, T.make_rng(seed))

    @property
    def molex_layers(self) -> list[MoLExLayer]:
        return [l.molex for l in self.layers if l.molex is not None]

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for n, p in self.frontend.named_parameters():
            yield f"frontend.{n}", p
        for i, layer in enumerate(self.layers):
            for n, p in layer.named_parameters():
                yield f"layers.{i}.{n}", p
        for n, p in self.merge.named_parameters():
            yield f"merge.{n}", p
        for n, p in self.head.named_parameters():
            yield f"classifier.{n}", p

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.named_parameters()}

    def experts_per_layer(self) -> list[int]:
        return [m.num_experts for m in self.molex_layers]

    def grow_to(self, experts_per_layer: list[int], frozen_counts: list[int] | None = None) -> None:
        """Resize MoLEx modules to hold the given expert counts (used when loading)."""
        mods = self.molex_layers
        if len(experts_per_layer) != len(mods):
            raise ConfigError(f"{len(experts_per_layer)} expert counts for {len(mods)} MoLEx modules")
        for j, (mod, n) in enumerate(zip(mods, experts_per_layer)):
            if n < mod.num_experts:
                raise ConfigError(f"cannot shrink MoLEx module {j} from {mod.num_experts} to {n} experts")
            d, r = mod.dim, mod.experts[0].rank
            while mod.num_experts < n:
                mod.experts.append(LoRAExpert(T.parameter(np.zeros((d, r))), T.parameter(np.zeros((r, d)))))
            mod.gating = GatingNetwork(T.parameter(np.zeros((d, n))), T.parameter(np.zeros((d, n))),
                                       mod.gating.noise_enabled, mod.gating.noise_bias)
            if frozen_counts is not None:
                for i, e in enumerate(mod.experts):
                    e.trainable = i >= frozen_counts[j]

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ConfigError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for name, p in params.items():
            if p.shape != state[name].shape:
                raise ShapeError(f"{name}: checkpoint shape {state[name].shape} != model shape {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)

    def forward(self, x, training: bool = False, rng: np.random.Generator | None = None) -> ForwardResult:
        x = T.as_tensor(x)
        single = x.ndim == 2
        if single:
            x = T.reshape(x, (1,) + x.shape)
        h = frontend(self.frontend, x)
        hidden, decisions = [], []
        for layer in self.layers:
            h, dec = layer_forward(layer, h, training, rng)
            hidden.append(h)
            if dec is not None:
                decisions.append(dec)
        logits = classify(self.head, attentive_merge(self.merge, hidden))
        if single:
            logits = T.reshape(logits, (2,))
        return ForwardResult(logits, decisions, hidden)

    def __call__(self, x, training=False, rng=None) -> ForwardResult:
        return self.forward(x, training, rng)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every parameter ``Encoder(cfg)`` would hold, without allocating it."""
    d, f, h = cfg.d, cfg.ffn_dim, cfg.lstm_hidden
    shapes: dict[str, tuple[int, ...]] = {"frontend.W": (cfg.d_in, d), "frontend.b": (d,)}
    for i in range(cfg.layers):
        p = f"layers.{i}."
        for n in ("wq", "wk", "wv", "wo"):
            shapes[p + f"attn.{n}"] = (d, d)
            shapes[p + f"attn.b{n[1]}"] = (d,)
        shapes.update({p + "ln1.gamma": (d,), p + "ln1.beta": (d,),
                       p + "ffn.w1": (d, f), p + "ffn.b1": (f,), p + "ffn.w2": (f, d), p + "ffn.b2": (d,),
                       p + "ln2.gamma": (d,), p + "ln2.beta": (d,)})
        if i < cfg.molex_layers:
            for e in range(cfg.n_experts):
                shapes[p + f"molex.experts.{e}.A"] = (d, cfg.rank)
                shapes[p + f"molex.experts.{e}.B"] = (cfg.rank, d)
            shapes[p + "molex.gate.W_G"] = (d, cfg.n_experts)
            shapes[p + "molex.gate.W_noise"] = (d, cfg.n_experts)
    shapes["merge.q"] = (d,)
    if cfg.merge_projection:
        for i in range(cfg.layers):
            shapes[f"merge.proj.{i}.W"] = (d, d)
            shapes[f"merge.proj.{i}.b"] = (d,)
    shapes.update({"classifier.lstm.w_ih": (d, 4 * h), "classifier.lstm.w_hh": (h, 4 * h),
                   "classifier.lstm.b": (4 * h,), "classifier.out.W": (h, 2), "classifier.out.b": (2,)})
    return shapes

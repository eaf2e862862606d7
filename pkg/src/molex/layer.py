"""Mixture of LoRA experts alongside a frozen feed-forward block.

Each routing position (one frame of one utterance) picks its top-K experts
from a softmax gate. Selected experts add ``g_i * A_i B_i phi`` to the FFN
output, with raw (not renormalized) gate scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

# softplus(NOISE_BIAS) == 0.1, the initial noise standard deviation
NOISE_BIAS = math.log(math.expm1(0.1))


@dataclass
class LoRAExpert:
    """Low-rank update ``A @ B`` with A: d x r and B: r x d."""

    a: Tensor
    b: Tensor
    trainable: bool = True

    def __post_init__(self):
        d, r = self.a.shape
        if self.b.shape != (r, d):
            raise ShapeError(f"LoRA factors disagree: A {self.a.shape}, B {self.b.shape}")

    @classmethod
    def init(cls, d: int, r: int, rng: np.random.Generator) -> LoRAExpert:
        # B = 0 so a fresh expert is a no-op on the backbone
        a = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, r))
        return cls(T.parameter(a), T.parameter(np.zeros((r, d))))

    @property
    def dim(self) -> int:
        return self.a.shape[0]

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    def weight(self) -> np.ndarray:
        return self.a.data @ self.b.data

    def parameters(self) -> list[Tensor]:
        return [self.a, self.b]


def lora_apply(expert: LoRAExpert, phi: Tensor) -> Tensor:
    """``A (B phi)`` for every row of ``phi`` (shape [..., d]); never forms A @ B."""
    if phi.shape[-1] != expert.dim:
        raise ShapeError(f"expert expects last dim {expert.dim}, got input {phi.shape}")
    return (phi @ T.transpose(expert.b)) @ T.transpose(expert.a)


@dataclass
class GatingNetwork:
    w_g: Tensor
    w_noise: Tensor
    noise_enabled: bool = True
    noise_bias: float = NOISE_BIAS

    @classmethod
    def init(cls, d: int, n: int, noise_enabled: bool = True) -> GatingNetwork:
        # zero gate: routing starts uniform and the training noise spreads positions over all experts
        return cls(T.parameter(np.zeros((d, n))), T.parameter(np.zeros((d, n))), noise_enabled)

    @property
    def num_experts(self) -> int:
        return self.w_g.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.w_g, self.w_noise]


def gate(g: GatingNetwork, phi: Tensor, training: bool = False,
         rng: np.random.Generator | None = None) -> Tensor:
    """Gate probabilities over the N experts for each row of ``phi`` ([..., d] -> [..., N]).

    In training with noise enabled the logits get ``eps * softplus(phi W_noise + c)``
    with eps ~ N(0, 1) drawn from ``rng``.
    """
    if phi.shape[-1] != g.w_g.shape[0]:
        raise ShapeError(f"gate expects last dim {g.w_g.shape[0]}, got input {phi.shape}")
    logits = phi @ g.w_g
    if training and g.noise_enabled:
        if rng is None:
            raise ConfigError("noisy gating in training mode needs an rng")
        eps = rng.standard_normal(logits.shape)
        logits = logits + T.softplus(phi @ g.w_noise + g.noise_bias) * eps
    return T.softmax(logits, axis=-1)


@dataclass
class RouterDecision:
    """Top-K expert ids per position (descending score) and the full score vectors."""

    indices: np.ndarray
    scores: np.ndarray

    @property
    def k(self) -> int:
        return self.indices.shape[-1]

    def mask(self) -> np.ndarray:
        m = np.zeros(self.scores.shape, dtype=bool)
        np.put_along_axis(m, self.indices, True, axis=-1)
        return m

    def selected_experts(self) -> list[int]:
        return sorted(int(i) for i in np.unique(self.indices))


def route(scores, k: int) -> RouterDecision:
    s = scores.data if isinstance(scores, Tensor) else np.asarray(scores, dtype=np.float64)
    n = s.shape[-1]
    if not 1 <= k <= n:
        raise ConfigError(f"top-K routing needs 1 <= K <= N, got K={k}, N={n}")
    return RouterDecision(T.argtopk(s, k), s.copy())


@dataclass
class MoLExLayer:
    experts: list[LoRAExpert]
    gating: GatingNetwork
    k: int
    ffn: Callable[[Tensor], Tensor] | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.experts) != self.gating.num_experts:
            raise ConfigError(f"{len(self.experts)} experts but gate has {self.gating.num_experts} outputs")
        if not 1 <= self.k <= len(self.experts):
            raise ConfigError(f"K={self.k} is outside 1..N={len(self.experts)}")

    @classmethod
    def init(cls, d: int, n: int, k: int, r: int, rng: np.random.Generator,
             ffn=None, noise_enabled: bool = True) -> MoLExLayer:
        experts = [LoRAExpert.init(d, r, rng) for _ in range(n)]
        return cls(experts, GatingNetwork.init(d, n, noise_enabled), k, ffn)

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    @property
    def dim(self) -> int:
        return self.gating.w_g.shape[0]

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for i, e in enumerate(self.experts):
            yield f"experts.{i}.A", e.a
            yield f"experts.{i}.B", e.b
        yield "gate.W_G", self.gating.w_g
        yield "gate.W_noise", self.gating.w_noise

    def __call__(self, phi, training=False, rng=None):
        return molex_forward(self, phi, training, rng)


def expert_mixture(layer: MoLExLayer, phi: Tensor, training: bool = False,
                   rng: np.random.Generator | None = None) -> tuple[Tensor, RouterDecision]:
    """The expert half of the layer output: sum over selected i of g_i A_i B_i phi.

    Each expert only processes the rows routed to it, so the cost grows with K.
    """
    if phi.shape[-1] != layer.dim:
        raise ShapeError(f"layer expects last dim {layer.dim}, got input {phi.shape}")
    lead = phi.shape[:-1]
    flat = T.reshape(phi, (-1, layer.dim))
    n_rows = flat.shape[0]
    scores = gate(layer.gating, flat, training, rng)
    decision = route(scores, layer.k)
    chosen = decision.mask()
    out = None
    for i, expert in enumerate(layer.experts):
        rows = np.flatnonzero(chosen[:, i])
        if rows.size == 0:
            continue
        y = lora_apply(expert, flat[rows])
        w = T.reshape(scores[rows, i], (-1, 1))
        part = T.index_add(y * w, rows, n_rows, unique=True)
        out = part if out is None else out + part
    decision = RouterDecision(decision.indices.reshape(lead + (layer.k,)),
                              decision.scores.reshape(lead + (layer.num_experts,)))
    return T.reshape(out, phi.shape), decision


def molex_forward(layer: MoLExLayer, phi: Tensor, training: bool = False,
                  rng: np.random.Generator | None = None) -> tuple[Tensor, RouterDecision]:
    mixed, decision = expert_mixture(layer, phi, training, rng)
    if layer.ffn is not None:
        mixed = mixed + layer.ffn(phi)
    return mixed, decision


def extend_experts(layer: MoLExLayer, count: int, rng: np.random.Generator) -> None:
    """Add ``count`` fresh trainable experts; freeze every existing one.

    Gate matrices grow by ``count`` columns. Old columns keep their values and
    stay trainable, since the router is updated during adaptation.
    """
    if count < 1:
        raise ConfigError(f"extend_experts needs count >= 1, got {count}")
    d = layer.dim
    r = layer.experts[0].rank
    for e in layer.experts:
        e.trainable = False
    layer.experts.extend(LoRAExpert.init(d, r, rng) for _ in range(count))
    g = layer.gating
    g.w_g = T.parameter(np.concatenate([g.w_g.data, np.zeros((d, count))], axis=1))
    g.w_noise = T.parameter(np.concatenate([g.w_noise.data, np.zeros((d, count))], axis=1))

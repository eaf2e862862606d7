"""Optimization: Adam, the freeze-aware training loop, the two-phase protocol,
and freeze-and-extend adaptation with replay."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import tensor as T
from .backbone import Encoder, spoof_score
from .data import Dataset
from .errors import ConfigError, ContractError, NumericError
from .freeze import FreezeMask
from .layer import extend_experts
from .losses import (LossReport, UtilizationAccumulator, cross_entropy, eer, importance_balance,
                     mean_effective_rank, orth_loss)
from .tensor import Tensor

log = logging.getLogger(__name__)

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    orth_weight: float = 1.0
    use_orth: bool = True
    orth_all_experts: bool = False
    balance_weight: float = 0.0
    seed: int = 0
    replay_fraction: float = 0.0
    rank_tau: float = 1e-2
    train_head_in_adapt: bool = False

    def __post_init__(self):
        if not 0.0 <= self.replay_fraction <= 1.0:
            raise ConfigError(f"replay_fraction must lie in [0, 1], got {self.replay_fraction}")
        if self.batch_size < 1 or self.epochs < 0 or self.lr < 0:
            raise ConfigError("need batch_size >= 1, epochs >= 0, lr >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**raw)


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: AdamState,
              lr: float, trainable: FreezeMask | None = None) -> None:
    """One Adam update, in place. Parameters with no gradient this step are skipped."""
    for name, p in params.items():
        if trainable is not None and not trainable.is_trainable(name):
            continue
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ContractError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
            state.t[name] = 0
        v = state.v[name]
        t = state.t[name] + 1
        m = BETA1 * m + (1 - BETA1) * g
        v = BETA2 * v + (1 - BETA2) * g * g
        state.m[name], state.v[name], state.t[name] = m, v, t
        m_hat = m / (1 - BETA1 ** t)
        v_hat = v / (1 - BETA2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


# ---------------------------------------------------------------- evaluation

def batches(n: int, size: int, order: np.ndarray | None = None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, size):
        yield idx[start:start + size]


def score_dataset(enc: Encoder, ds: Dataset, batch_size: int = 64,
                  accumulator: UtilizationAccumulator | None = None) -> np.ndarray:
    """Inference-mode scores (higher = bonafide); optionally accumulates gate usage."""
    feats = ds.features()
    out = np.empty(len(ds))
    for idx in batches(len(ds), batch_size):
        res = enc.forward(feats[idx], training=False)
        out[idx] = spoof_score(res.logits)
        if accumulator is not None and res.decisions:
            accumulator.update(res.decisions)
    return out


def evaluate_eer(enc: Encoder, ds: Dataset, batch_size: int = 64) -> float:
    return eer(score_dataset(enc, ds, batch_size), [u.label for u in ds])


def utilization(enc: Encoder, ds: Dataset, batch_size: int = 64) -> np.ndarray:
    acc = UtilizationAccumulator()
    score_dataset(enc, ds, batch_size, acc)
    return acc.report()


# ---------------------------------------------------------------- training loop

@dataclass
class EpochRecord:
    epoch: int
    l_ce: float
    l_orth: float
    dev_eer: float
    mean_eff_rank: float


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)
    initial_loss: float = float("nan")
    initial_ce: float = float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "l_ce", "l_orth", "dev_eer", "mean_eff_rank"])
        for r in self.records:
            w.writerow([r.epoch, f"{r.l_ce:.6f}", f"{r.l_orth:.6f}", f"{r.dev_eer:.6f}", f"{r.mean_eff_rank:.4f}"])
        return buf.getvalue()

    @property
    def last(self) -> EpochRecord:
        return self.records[-1]


def batch_loss(enc: Encoder, x: np.ndarray, y: np.ndarray, cfg: TrainConfig, rng: np.random.Generator,
               training: bool = True) -> tuple[Tensor, LossReport]:
    res = enc.forward(x, training=training, rng=rng)
    l_ce = cross_entropy(res.logits, y)
    total = l_ce
    l_orth_val, per_module = 0.0, []
    mods = enc.molex_layers
    if cfg.use_orth and mods:
        l_orth, per_module = orth_loss(mods, res.decisions, all_experts=cfg.orth_all_experts)
        l_orth_val = float(l_orth.data)
        if l_orth.requires_grad:
            total = total + l_orth * cfg.orth_weight
    if cfg.balance_weight > 0 and mods:
        flat = [T.reshape(Tensor(d.scores), (-1, d.scores.shape[-1])) for d in res.decisions]
        total = total + importance_balance(res.decisions, flat) * cfg.balance_weight
    rep = LossReport(float(l_ce.data), l_orth_val, float(total.data), per_module)
    return total, rep


def _snapshot(enc: Encoder, names) -> dict[str, np.ndarray]:
    params = dict(enc.named_parameters())
    return {n: params[n].data.copy() for n in names}


def verify_frozen(enc: Encoder, snapshot: dict[str, np.ndarray]) -> None:
    params = dict(enc.named_parameters())
    changed = [n for n, v in snapshot.items() if not np.array_equal(params[n].data, v)]
    if changed:
        raise ContractError(f"frozen tensors changed during training: {changed[:5]}")


def fit(enc: Encoder, epoch_data: Callable[[int], Dataset], cfg: TrainConfig, mask: FreezeMask,
        dev: Dataset | None = None) -> History:
    """Mini-batch Adam over the trainable set; the frozen set is checked bit-exact every epoch."""
    params = dict(enc.named_parameters())
    frozen_names = [n for n in params if not mask.is_trainable(n)]
    snapshot = _snapshot(enc, frozen_names)
    shuffle_rng = np.random.default_rng([cfg.seed, 0])
    noise_rng = np.random.default_rng([cfg.seed, 1])
    state = AdamState()
    hist = History()
    saved_flags = {n: p.requires_grad for n, p in params.items()}
    # frozen tensors get no gradient at all; activations still carry one through them
    for n, p in params.items():
        p.requires_grad = mask.is_trainable(n)
    step = 0
    try:
        for epoch in range(cfg.epochs):
            ds = epoch_data(epoch)
            if len(ds) == 0:
                raise ContractError("training dataset is empty")
            feats, labels = ds.features(), ds.labels()
            order = shuffle_rng.permutation(len(ds))
            ce_sum = orth_sum = 0.0
            n_batches = 0
            for idx in batches(len(ds), cfg.batch_size, order):
                try:
                    loss, rep = batch_loss(enc, feats[idx], labels[idx], cfg, noise_rng)
                except NumericError as exc:
                    raise NumericError(f"{exc} at epoch {epoch}, step {step}") from exc
                if not math.isfinite(rep.total):
                    raise NumericError(f"non-finite loss {rep.total} at epoch {epoch}, step {step}")
                if step == 0:
                    hist.initial_loss, hist.initial_ce = rep.total, rep.l_ce
                T.zero_grad(params.values())
                if loss.requires_grad:
                    loss.backward()
                adam_step(params, {n: p.grad for n, p in params.items()}, state, cfg.lr, mask)
                ce_sum += rep.l_ce
                orth_sum += rep.l_orth
                n_batches += 1
                step += 1
            verify_frozen(enc, snapshot)
            dev_eer = evaluate_eer(enc, dev) if dev is not None else float("nan")
            mods = enc.molex_layers
            rank = mean_effective_rank(mods, cfg.rank_tau) if mods else float("nan")
            rec = EpochRecord(epoch, ce_sum / n_batches, orth_sum / n_batches, dev_eer, rank)
            hist.records.append(rec)
            log.info("epoch %d  l_ce %.4f  l_orth %.3f  dev_eer %.4f  rank %.2f",
                     epoch, rec.l_ce, rec.l_orth, rec.dev_eer, rec.mean_eff_rank)
    finally:
        for n, p in params.items():
            p.requires_grad = saved_flags[n]
            p.grad = None
    return hist


def train(enc: Encoder, dataset: Dataset, cfg: TrainConfig, mask: FreezeMask | None = None,
          dev: Dataset | None = None) -> History:
    """Phase B by default: MoLEx, merge and classifier train; the backbone stays frozen."""
    if len(dataset) == 0:
        raise ContractError("training dataset is empty")
    return fit(enc, lambda _: dataset, cfg, mask if mask is not None else FreezeMask.molex(enc), dev)


def pretrain(enc: Encoder, dataset: Dataset, cfg: TrainConfig, dev: Dataset | None = None) -> History:
    """Phase A: the backbone learns the base task with the experts still at their no-op init."""
    cfg = TrainConfig(**{**cfg.to_dict(), "use_orth": False})
    return train(enc, dataset, cfg, FreezeMask.pretrain(enc), dev)


def replay_sample(old: Dataset, n_new: int, fraction: float, rng: np.random.Generator) -> Dataset:
    n = min(len(old), math.ceil(fraction * n_new))
    if n == 0:
        return Dataset()
    return old.subset(np.sort(rng.choice(len(old), size=n, replace=False)))


def adapt(base: Encoder, new: Dataset, old: Dataset | None, new_expert_count: int, cfg: TrainConfig,
          dev: Dataset | None = None) -> History:
    """Freeze-and-extend: add experts to every MoLEx module and train only them and the routers.

    Each epoch mixes in ceil(replay_fraction * |new|) old-domain utterances drawn
    with a dedicated seed stream. Modifies ``base`` in place.
    """
    if cfg.replay_fraction > 0 and not old:
        raise ConfigError("replay_fraction > 0 needs an old-domain dataset")
    if len(new) == 0:
        raise ContractError("new-domain dataset is empty")
    ext_rng = np.random.default_rng([cfg.seed, 3])
    for mod in base.molex_layers:
        extend_experts(mod, new_expert_count, ext_rng)
    mask = FreezeMask.adaptation(base, train_head=cfg.train_head_in_adapt)
    replay_rng = np.random.default_rng([cfg.seed, 2])

    def epoch_data(_epoch: int) -> Dataset:
        if cfg.replay_fraction == 0:
            return new
        return new + replay_sample(old, len(new), cfg.replay_fraction, replay_rng)

    return fit(base, epoch_data, cfg, mask, dev)

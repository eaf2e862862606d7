"""Losses and diagnostics: orthogonality penalty, cross-entropy, effective rank,
expert utilization, EER, and parameter accounting."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .backbone import Encoder, ModelConfig, parameter_shapes
from .errors import ContractError
from .freeze import FreezeMask, is_gate, is_head, is_molex
from .layer import LoRAExpert, MoLExLayer, RouterDecision
from .linalg import low_rank_singular_values
from .tensor import Tensor


# ---------------------------------------------------------------- orthogonality

def gram(e: LoRAExpert) -> Tensor:
    """(AB)(AB)^T, materialized at d x d. Use for inspection and tests only."""
    w = e.a @ e.b
    return w @ T.transpose(w)


def orth_term(e: LoRAExpert) -> Tensor:
    """||(AB)(AB)^T - I||_F^2 through the r x r matrix S = (A^T A)(B B^T).

    tr(G^2) = tr(S^2) and tr(G) = tr(S), so the d x d Gram matrix is never formed.
    """
    s = (T.transpose(e.a) @ e.a) @ (e.b @ T.transpose(e.b))
    return T.tsum(s * T.transpose(s)) - 2.0 * T.trace(s) + float(e.dim)


def orth_loss(modules: Sequence[MoLExLayer], decisions: Sequence[RouterDecision] | None = None,
              all_experts: bool = False) -> tuple[Tensor, list[float]]:
    """Sum of orth_term over the experts routed anywhere in the batch, per module.

    Returns the total and a per-module breakdown. ``all_experts`` ignores routing.
    """
    if not all_experts and decisions is None:
        raise ContractError("orth_loss needs router decisions unless all_experts=True")
    if decisions is not None and len(decisions) != len(modules):
        raise ContractError(f"{len(decisions)} router decisions for {len(modules)} MoLEx modules")
    total: Tensor | None = None
    per_module = []
    for j, mod in enumerate(modules):
        chosen = range(mod.num_experts) if all_experts else decisions[j].selected_experts()
        part = None
        for i in chosen:
            term = orth_term(mod.experts[i])
            part = term if part is None else part + term
        if part is None:
            per_module.append(0.0)
            continue
        per_module.append(part.item())
        total = part if total is None else total + part
    return (total if total is not None else Tensor(0.0)), per_module


def orth_lower_bound(modules: Sequence[MoLExLayer]) -> float:
    """M * K * (d - r): no rank-r expert can get below d - r."""
    return float(sum(m.k * (m.dim - m.experts[0].rank) for m in modules))


# ---------------------------------------------------------------- classification

def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    logp = T.log_softmax(logits, axis=-1)
    picked = logp[np.arange(labels.shape[0]), labels]
    return -T.mean(picked)


def importance_balance(decisions: Sequence[RouterDecision], scores: Sequence[Tensor]) -> Tensor:
    """Squared coefficient of variation of per-expert summed gate mass (optional aux term)."""
    total = None
    for s in scores:
        imp = T.tsum(T.reshape(s, (-1, s.shape[-1])), axis=0)
        mu = T.mean(imp)
        cv2 = T.mean((imp - mu) ** 2) / (mu * mu + 1e-10)
        total = cv2 if total is None else total + cv2
    return total if total is not None else Tensor(0.0)


@dataclass
class LossReport:
    l_ce: float
    l_orth: float
    total: float
    orth_per_module: list[float] = field(default_factory=list)


# ---------------------------------------------------------------- effective rank

def expert_singular_values(e: LoRAExpert) -> np.ndarray:
    return low_rank_singular_values(e.a.data, e.b.data)


def effective_rank(e: LoRAExpert, tau: float) -> int:
    """Number of singular values of AB at or above ``tau``."""
    if tau <= 0:
        raise ContractError(f"tau must be positive, got {tau}")
    return int(np.sum(expert_singular_values(e) >= tau))


def effective_ranks(modules: Sequence[MoLExLayer], tau: float) -> np.ndarray:
    """[module, expert] table; modules with fewer experts are padded with -1."""
    width = max(m.num_experts for m in modules)
    out = np.full((len(modules), width), -1, dtype=np.int64)
    for j, m in enumerate(modules):
        for i, e in enumerate(m.experts):
            out[j, i] = effective_rank(e, tau)
    return out


def mean_effective_rank(modules: Sequence[MoLExLayer], tau: float) -> float:
    ranks = effective_ranks(modules, tau)
    return float(ranks[ranks >= 0].mean())


# ---------------------------------------------------------------- utilization

class UtilizationAccumulator:
    """Running per-layer sums of full gate-score vectors over routed positions."""

    def __init__(self):
        self.sums: list[np.ndarray] = []
        self.counts: list[int] = []

    def update(self, decisions: Sequence[RouterDecision]) -> None:
        if not self.sums:
            self.sums = [np.zeros(d.scores.shape[-1]) for d in decisions]
            self.counts = [0] * len(decisions)
        if len(decisions) != len(self.sums):
            raise ContractError(f"{len(decisions)} layers in update, accumulator has {len(self.sums)}")
        for j, d in enumerate(decisions):
            flat = d.scores.reshape(-1, d.scores.shape[-1])
            if flat.shape[1] != self.sums[j].shape[0]:
                raise ContractError(f"layer {j}: {flat.shape[1]} experts, accumulator has {self.sums[j].shape[0]}")
            self.sums[j] += flat.sum(axis=0)
            self.counts[j] += flat.shape[0]

    def merge(self, other: UtilizationAccumulator) -> UtilizationAccumulator:
        out = UtilizationAccumulator()
        if not self.sums:
            out.sums, out.counts = [s.copy() for s in other.sums], list(other.counts)
            return out
        if not other.sums:
            out.sums, out.counts = [s.copy() for s in self.sums], list(self.counts)
            return out
        out.sums = [a + b for a, b in zip(self.sums, other.sums)]
        out.counts = [a + b for a, b in zip(self.counts, other.counts)]
        return out

    def report(self) -> np.ndarray:
        """[layer, expert] mean gate scores."""
        if not self.sums or min(self.counts) == 0:
            raise ContractError("utilization report requested from an empty accumulator")
        return np.stack([s / c for s, c in zip(self.sums, self.counts)])


def utilization_csv(report: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "expert", "utilization"])
    for l, row in enumerate(report):
        for i, v in enumerate(row):
            w.writerow([l, i, f"{v:.6f}"])
    return buf.getvalue()


def total_variation(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Per-row TV distance between two utilization reports."""
    return 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(axis=-1)


# ---------------------------------------------------------------- EER

@dataclass
class EerResult:
    eer: float
    threshold: float
    inverted: bool  # raw EER above 0.5: scores rank spoof above bonafide


def eer_details(scores: Iterable[float], labels: Iterable) -> EerResult:
    """Equal error rate for scores where higher means bonafide.

    ``labels`` hold ``"bonafide"``/``"spoof"`` strings or 1/0 (1 = bonafide).
    The sweep accepts ``score >= threshold`` at each unique score (tied scores
    share one operating point) and interpolates linearly where FAR meets FRR.
    """
    s = np.asarray(list(scores), dtype=np.float64)
    y = _as_bonafide_mask(labels)
    if s.shape != y.shape:
        raise ContractError(f"{s.size} scores for {y.size} labels")
    n_bona, n_spoof = int(y.sum()), int((~y).sum())
    if n_bona == 0 or n_spoof == 0:
        raise ContractError("EER needs at least one bonafide and one spoof score")
    thresholds = np.unique(s)
    bona = np.sort(s[y])
    spoof = np.sort(s[~y])
    # accept when score >= t
    far = (n_spoof - np.searchsorted(spoof, thresholds, side="left")) / n_spoof
    frr = np.searchsorted(bona, thresholds, side="left") / n_bona
    thresholds = np.append(thresholds, np.inf)
    far = np.append(far, 0.0)
    frr = np.append(frr, 1.0)
    diff = far - frr
    # diff is non-increasing, starting >= 0 and ending < 0
    k = int(np.flatnonzero(diff <= 0)[0])
    if diff[k] == 0 or k == 0:
        value = float(far[k])
        thr = float(thresholds[k])
    else:
        d1, d2 = diff[k - 1], diff[k]
        t = d1 / (d1 - d2)
        value = float(far[k - 1] + t * (far[k] - far[k - 1]))
        thr = float(thresholds[k - 1] + t * (thresholds[k] - thresholds[k - 1])) if np.isfinite(thresholds[k]) \
            else float(thresholds[k - 1])
    return EerResult(value, thr, value > 0.5)


def eer(scores: Iterable[float], labels: Iterable) -> float:
    return eer_details(scores, labels).eer


def _as_bonafide_mask(labels: Iterable) -> np.ndarray:
    out = []
    for lab in labels:
        if isinstance(lab, str):
            if lab not in ("bonafide", "spoof"):
                raise ContractError(f"unknown label {lab!r}")
            out.append(lab == "bonafide")
        else:
            out.append(bool(lab))
    return np.asarray(out, dtype=bool)


# ---------------------------------------------------------------- parameter accounting

@dataclass
class ParamCountReport:
    full_finetune_count: int
    trainable_count: int
    reduction_percent: float
    breakdown: dict[str, int]
    trainable_breakdown: dict[str, int]

    def to_dict(self) -> dict:
        return {
            "full_finetune_count": self.full_finetune_count,
            "trainable_count": self.trainable_count,
            "reduction_percent": self.reduction_percent,
            "breakdown": dict(self.breakdown),
            "trainable_breakdown": dict(self.trainable_breakdown),
        }

    def render(self) -> str:
        lines = [f"{'component':<16}{'total':>14}{'trainable':>14}"]
        for comp, n in self.breakdown.items():
            lines.append(f"{comp:<16}{n:>14,}{self.trainable_breakdown.get(comp, 0):>14,}")
        lines.append(f"{'all':<16}{self.full_finetune_count:>14,}{self.trainable_count:>14,}")
        lines.append(f"reduction: {self.reduction_percent:.2f}%")
        return "\n".join(lines)


def component_of(name: str) -> str:
    if name.startswith("frontend."):
        return "frontend"
    if name.startswith("merge."):
        return "merge"
    if name.startswith("classifier."):
        return "classifier"
    if is_gate(name):
        return "molex_gates"
    if is_molex(name):
        return "molex_experts"
    if ".attn." in name:
        return "attention"
    if ".ffn." in name:
        return "ffn"
    return "layernorm"


def count_params(model: Encoder | ModelConfig, mask: FreezeMask | None = None) -> ParamCountReport:
    """Exact counts of all parameters vs. the trainable ones.

    A config is counted from shapes alone, so the large layouts never get allocated.
    Without ``mask`` the trainable set is MoLEx + merge + classifier.
    """
    if isinstance(model, ModelConfig):
        sizes = {n: int(np.prod(s)) for n, s in parameter_shapes(model).items()}
    else:
        sizes = {n: p.size for n, p in model.named_parameters()}
    if mask is None:
        trainable = {n for n in sizes if is_molex(n) or is_head(n)}
    else:
        trainable = {n for n in sizes if mask.is_trainable(n)}
    breakdown: dict[str, int] = {}
    tb: dict[str, int] = {}
    for n, k in sizes.items():
        c = component_of(n)
        breakdown[c] = breakdown.get(c, 0) + k
        if n in trainable:
            tb[c] = tb.get(c, 0) + k
    full = sum(sizes.values())
    train = sum(sizes[n] for n in trainable)
    return ParamCountReport(full, train, 100.0 * (1.0 - train / full), breakdown, tb)

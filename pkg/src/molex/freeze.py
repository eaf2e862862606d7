"""Which named parameters an optimizer may touch."""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .backbone import Encoder

_EXPERT = re.compile(r"^layers\.(\d+)\.molex\.experts\.(\d+)\.[AB]$")


def is_molex(name: str) -> bool:
    return ".molex." in name


def is_gate(name: str) -> bool:
    return ".molex.gate." in name


def is_head(name: str) -> bool:
    return name.startswith(("merge.", "classifier."))


def expert_index(name: str) -> tuple[int, int] | None:
    m = _EXPERT.match(name)
    return (int(m.group(1)), int(m.group(2))) if m else None


@dataclass
class FreezeMask:
    trainable: set[str] = field(default_factory=set)

    def is_trainable(self, name: str) -> bool:
        return name in self.trainable

    def __contains__(self, name: str) -> bool:
        return name in self.trainable

    def frozen(self, names) -> list[str]:
        return [n for n in names if n not in self.trainable]

    @classmethod
    def all(cls, encoder: Encoder) -> FreezeMask:
        return cls({n for n, _ in encoder.named_parameters()})

    @classmethod
    def pretrain(cls, encoder: Encoder) -> FreezeMask:
        """Backbone, merge and classifier; MoLEx modules stay at their no-op init."""
        return cls({n for n, _ in encoder.named_parameters() if not is_molex(n)})

    @classmethod
    def molex(cls, encoder: Encoder) -> FreezeMask:
        """Trainable experts, routers, merge and classifier; the backbone is frozen."""
        return cls(_molex_names(encoder) | {n for n, _ in encoder.named_parameters() if is_head(n)})

    @classmethod
    def adaptation(cls, encoder: Encoder, train_head: bool = False) -> FreezeMask:
        """Only experts flagged trainable (the new ones) plus routers; optionally the head too."""
        names = _molex_names(encoder)
        if train_head:
            names |= {n for n, _ in encoder.named_parameters() if is_head(n)}
        return cls(names)


def _molex_names(encoder: Encoder) -> set[str]:
    names = set()
    layer_ids = [i for i, l in enumerate(encoder.layers) if l.molex is not None]
    for li in layer_ids:
        mod = encoder.layers[li].molex
        for ei, e in enumerate(mod.experts):
            if e.trainable:
                names.add(f"layers.{li}.molex.experts.{ei}.A")
                names.add(f"layers.{li}.molex.experts.{ei}.B")
        names.add(f"layers.{li}.molex.gate.W_G")
        names.add(f"layers.{li}.molex.gate.W_noise")
    return names

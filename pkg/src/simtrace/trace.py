"""Execution traces: addressed draws, observations and their joint score."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

from .addressing import Address
from .distributions import Distribution
from .values import Value

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_U64 = (1 << 64) - 1


def fnv1a_64(data: bytes, h: int = FNV_OFFSET) -> int:
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & _U64
    return h


class EntryKind(enum.IntEnum):
    LATENT = 0
    OBSERVED = 1
    REPLACED = 2


@dataclass
class TraceEntry:
    address: Address
    distribution: Distribution
    value: Value
    log_prob: float
    kind: EntryKind
    control: bool = True
    replace: bool = False
    name: str = ""


@dataclass
class Trace:
    entries: list[TraceEntry] = field(default_factory=list)
    observation: Optional[Value] = None
    result: Optional[Value] = None
    log_prior: float = 0.0
    log_likelihood: float = 0.0
    type_id: int = 0
    # accumulated log p - log q over guided draws; 0 under prior execution
    log_weight_correction: float = 0.0

    def latents(self) -> list[TraceEntry]:
        return [e for e in self.entries if e.kind == EntryKind.LATENT]

    def observed(self) -> list[TraceEntry]:
        return [e for e in self.entries if e.kind == EntryKind.OBSERVED]

    def control_latents(self) -> list[TraceEntry]:
        return [e for e in self.entries if e.kind == EntryKind.LATENT and e.control]

    def latent_values(self) -> dict[Address, Value]:
        return {e.address: e.value for e in self.latents()}

    @property
    def log_weight(self) -> float:
        """Importance weight log p(x) + log p(y|x) - log q(x)."""
        return self.log_likelihood + self.log_weight_correction

    def finalize(self):
        """Recompute the derived fields from the entry list."""
        self.log_prior = sum(e.log_prob for e in self.entries if e.kind == EntryKind.LATENT)
        self.log_likelihood = sum(e.log_prob for e in self.entries if e.kind == EntryKind.OBSERVED)
        self.type_id = trace_type(self)
        return self

    def __len__(self):
        return len(self.entries)

    def __repr__(self):
        return (f"Trace(latents={len(self.latents())}, entries={len(self.entries)}, "
                f"type=0x{self.type_id:016x}, log_joint={log_joint(self):.4f})")


def log_joint(t: Trace) -> float:
    """log p(y, x) = log p(x) + log p(y | x)."""
    return t.log_prior + t.log_likelihood


def trace_type(t: Trace) -> int:
    """64-bit FNV-1a over the ordered latent address sequence.

    Replaced entries are excluded, so rejection-loop redraws do not perturb
    the type of the accepted structure.
    """
    h = FNV_OFFSET
    for e in t.entries:
        if e.kind != EntryKind.LATENT:
            continue
        h = fnv1a_64(e.address.full.encode("utf-8"), h)
        h = fnv1a_64(b"\x00", h)
        h = fnv1a_64(e.address.instance.to_bytes(4, "little"), h)
        h = fnv1a_64(b"\x01", h)
    return h


def latent_address_sequence(t: Trace) -> tuple[Address, ...]:
    return tuple(e.address for e in t.latents())

"""Modalities, availability masks and the 15-subset enumeration."""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from itertools import combinations
from typing import Iterable, Sequence


class Modality(IntEnum):
    """MRI contrasts in canonical order (token concatenation and report columns)."""

    FLAIR = 0
    T1c = 1
    T1 = 2
    T2 = 3

    @classmethod
    def parse(cls, name: str) -> "Modality":
        key = name.strip().lower()
        for m in cls:
            if m.name.lower() == key:
                return m
        raise ValueError(f"unknown modality {name!r}; expected one of {', '.join(MODALITY_NAMES)}")


MODALITIES: tuple[Modality, ...] = tuple(Modality)
MODALITY_NAMES: tuple[str, ...] = tuple(m.name for m in Modality)


@dataclass(frozen=True)
class ModalityMask:
    """Availability indicators, one per modality in canonical order."""

    delta: tuple[bool, bool, bool, bool]

    def __post_init__(self):
        if len(self.delta) != len(MODALITIES):
            raise ValueError(f"mask needs {len(MODALITIES)} entries, got {len(self.delta)}")
        object.__setattr__(self, "delta", tuple(bool(d) for d in self.delta))

    @classmethod
    def full(cls) -> "ModalityMask":
        return cls((True,) * len(MODALITIES))

    @classmethod
    def of(cls, modalities: Iterable) -> "ModalityMask":
        chosen = {m if isinstance(m, Modality) else Modality.parse(m) for m in modalities}
        return cls(tuple(m in chosen for m in MODALITIES))

    @classmethod
    def parse(cls, text: str) -> "ModalityMask":
        """Parse ``"FLAIR,T2"`` style lists (case-insensitive)."""
        names = [t for t in text.split(",") if t.strip()]
        if not names:
            raise ValueError("empty modality list")
        return cls.of(names)

    def __getitem__(self, m) -> bool:
        if isinstance(m, str):
            m = Modality.parse(m)
        return self.delta[int(m)]

    def __iter__(self):
        return iter(self.delta)

    @property
    def present(self) -> tuple[Modality, ...]:
        return tuple(m for m, d in zip(MODALITIES, self.delta) if d)

    @property
    def count(self) -> int:
        return sum(self.delta)

    @property
    def missing_count(self) -> int:
        return len(MODALITIES) - self.count

    def is_empty(self) -> bool:
        return not any(self.delta)

    def require_nonempty(self) -> None:
        if self.is_empty():
            raise ValueError("at least one modality must be available")

    def glyphs(self) -> str:
        return " ".join("●" if d else "○" for d in self.delta)

    def flags(self) -> tuple[int, ...]:
        return tuple(int(d) for d in self.delta)

    def __str__(self) -> str:
        return ",".join(m.name for m in self.present) or "<none>"


def enumerate_subsets() -> list[ModalityMask]:
    """All non-empty subsets: singletons, pairs, triples, then the full set.

    Within a size, subsets follow lexicographic order of the canonical
    modality index, which places FLAIR first.
    """
    out = []
    for k in range(1, len(MODALITIES) + 1):
        for combo in combinations(MODALITIES, k):
            out.append(ModalityMask.of(combo))
    return out


def coerce_mask(mask) -> ModalityMask:
    if isinstance(mask, ModalityMask):
        return mask
    if isinstance(mask, str):
        return ModalityMask.parse(mask)
    if isinstance(mask, Sequence) and len(mask) == len(MODALITIES) and all(isinstance(v, (bool, int)) and not isinstance(v, Modality) for v in mask):
        return ModalityMask(tuple(bool(v) for v in mask))
    return ModalityMask.of(mask)

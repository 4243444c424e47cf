"""Welzel value profiles, LMH discretization and profile aggregation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Sequence


class SubIndex(IntEnum):
    """The eight Welzel sub-indices in their fixed order (1-4 secular, 5-8 emancipative)."""

    DEFIANCE = 1
    DISBELIEF = 2
    RELATIVISM = 3
    SCEPTICISM = 4
    AUTONOMY = 5
    EQUALITY = 6
    CHOICE = 7
    VOICE = 8

    @property
    def secular(self) -> bool:
        return self.value <= 4

    @property
    def emancipative(self) -> bool:
        return self.value >= 5


SUBINDEX_ORDER: tuple[str, ...] = tuple(s.name for s in SubIndex)
N_DIMS = len(SUBINDEX_ORDER)

SUBINDEX_MEANINGS: dict[str, str] = {
    "DEFIANCE": "Less deference to authority/tradition (higher = more defiant).",
    "DISBELIEF": "Lower religiosity (higher = more disbelief).",
    "RELATIVISM": "Less moral absolutism (higher = more relativist).",
    "SCEPTICISM": "More skepticism toward traditional state institutions.",
    "AUTONOMY": "Preference for independence/imagination over obedience in child-raising.",
    "EQUALITY": "Support for gender equality.",
    "CHOICE": "Acceptance of private-life choices (e.g., divorce/abortion/homosexuality).",
    "VOICE": "Support for free speech and people having a say.",
}

LOW, MEDIUM, HIGH = "low", "medium", "high"
LMH_LABELS: tuple[str, ...] = (LOW, MEDIUM, HIGH)
LABEL_RANK = {label: rank for rank, label in enumerate(LMH_LABELS)}


class ValueDomainError(ValueError):
    """Raised when a value, profile or threshold is outside its domain."""


class EmptySupportError(ValueDomainError):
    """Raised when aggregating over no profiles."""


@dataclass(frozen=True)
class Thresholds:
    tau1: float = 0.33
    tau2: float = 0.67

    def __post_init__(self):
        if not (0.0 < self.tau1 < self.tau2 < 1.0):
            raise ValueDomainError(
                f"thresholds must satisfy 0 < tau1 < tau2 < 1, got ({self.tau1}, {self.tau2})"
            )

    def to_dict(self) -> dict:
        return {"tau1": self.tau1, "tau2": self.tau2}


DEFAULT_THRESHOLDS = Thresholds()


@dataclass(frozen=True)
class WelzelProfile:
    """Eight sub-index values in [0, 1], ordered as ``SUBINDEX_ORDER``."""

    values: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if len(vals) != N_DIMS:
            raise ValueDomainError(f"profile needs {N_DIMS} values, got {len(vals)}")
        for name, v in zip(SUBINDEX_ORDER, vals):
            if not (0.0 <= v <= 1.0):
                raise ValueDomainError(f"{name}={v!r} outside [0, 1]")
        object.__setattr__(self, "values", vals)

    def __getitem__(self, idx: int | str | SubIndex) -> float:
        if isinstance(idx, str):
            idx = SubIndex[idx]
        if isinstance(idx, SubIndex):
            idx = idx.value - 1
        return self.values[idx]

    def __len__(self) -> int:
        return N_DIMS

    def to_list(self) -> list[float]:
        return list(self.values)


def _check_label(label: str) -> str:
    if label not in LABEL_RANK:
        raise ValueDomainError(f"invalid LMH label {label!r}")
    return label


@dataclass(frozen=True)
class LMHSignature:
    """Eight low/medium/high labels; serializes as an ordered list of strings."""

    labels: tuple[str, ...]

    def __post_init__(self):
        labels = tuple(self.labels)
        if len(labels) != N_DIMS:
            raise ValueDomainError(f"signature needs {N_DIMS} labels, got {len(labels)}")
        for label in labels:
            _check_label(label)
        object.__setattr__(self, "labels", labels)

    def __iter__(self):
        return iter(self.labels)

    def __getitem__(self, idx: int) -> str:
        return self.labels[idx]

    def __len__(self) -> int:
        return N_DIMS

    def to_list(self) -> list[str]:
        return list(self.labels)

    @classmethod
    def of(cls, labels: Iterable[str]) -> "LMHSignature":
        return cls(tuple(labels))


def discretize_scalar(a: float, thresholds: Thresholds = DEFAULT_THRESHOLDS) -> str:
    """Map a sub-index value to ``low`` (< tau1), ``medium`` (< tau2) or ``high``."""
    if isinstance(a, bool) or not isinstance(a, (int, float)) or math.isnan(a):
        raise ValueDomainError(f"not a real value: {a!r}")
    if not (0.0 <= a <= 1.0):
        raise ValueDomainError(f"value {a!r} outside [0, 1]")
    if a < thresholds.tau1:
        return LOW
    if a < thresholds.tau2:
        return MEDIUM
    return HIGH


def discretize_profile(
    profile: WelzelProfile, thresholds: Thresholds = DEFAULT_THRESHOLDS
) -> LMHSignature:
    return LMHSignature(tuple(discretize_scalar(v, thresholds) for v in profile.values))


def mean_profile(profiles: Sequence[WelzelProfile]) -> WelzelProfile:
    """Component-wise arithmetic mean of one or more profiles."""
    if len(profiles) == 0:
        raise EmptySupportError("cannot average an empty list of profiles")
    n = len(profiles)
    # fsum keeps the result independent of input order
    means = [math.fsum(p.values[d] for p in profiles) / n for d in range(N_DIMS)]
    # an exact mean of [0,1] values cannot leave [0,1]; guard against last-ulp drift
    return WelzelProfile(tuple(min(1.0, max(0.0, m)) for m in means))


def signature_match_fraction(pred: LMHSignature, gold: LMHSignature) -> float:
    hits = sum(1 for a, b in zip(pred.labels, gold.labels) if a == b)
    return hits / N_DIMS

"""Map free-form completion text to a polarity label.

Matching is a case-insensitive substring scan over each label's keywords.
``None`` stands for an unparseable completion throughout the package.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Mapping

from .corpus import Polarity


class Occurrence(enum.Enum):
    LAST = "last"
    FIRST = "first"


class Fallback(enum.Enum):
    COUNT_AS_WRONG = "count_as_wrong"
    ASSIGN_NEUTRAL = "assign_neutral"


DEFAULT_KEYWORDS: Mapping[Polarity, tuple[str, ...]] = {
    Polarity.POSITIVE: ("positive",),
    Polarity.NEGATIVE: ("negative",),
    Polarity.NEUTRAL: ("neutral",),
}


@dataclass(frozen=True)
class ExtractionPolicy:
    keywords: Mapping[Polarity, tuple[str, ...]] = field(default_factory=lambda: dict(DEFAULT_KEYWORDS))
    occurrence: Occurrence = Occurrence.LAST
    fallback: Fallback = Fallback.COUNT_AS_WRONG

    def __post_init__(self) -> None:
        seen: dict[str, Polarity] = {}
        for label, words in self.keywords.items():
            for word in words:
                key = word.casefold()
                if not key:
                    raise ValueError("empty keyword")
                if key in seen and seen[key] is not label:
                    raise ValueError(f"keyword {word!r} assigned to both {seen[key].label} and {label.label}")
                seen[key] = label

    def to_dict(self) -> dict:
        return {
            "keywords": {label.label: list(words) for label, words in sorted(self.keywords.items())},
            "occurrence": self.occurrence.value,
            "fallback": self.fallback.value,
        }

    @classmethod
    def from_dict(cls, data: Mapping | None) -> ExtractionPolicy:
        data = dict(data or {})
        kwargs = {}
        if "keywords" in data:
            kwargs["keywords"] = {Polarity.parse(k): tuple(v) for k, v in data.pop("keywords").items()}
        if "occurrence" in data:
            kwargs["occurrence"] = Occurrence(data.pop("occurrence"))
        if "fallback" in data:
            kwargs["fallback"] = Fallback(data.pop("fallback"))
        if data:
            raise ValueError(f"unknown extraction keys: {', '.join(sorted(data))}")
        return cls(**kwargs)


DEFAULT_POLICY = ExtractionPolicy()


def extract_polarity(text: str, policy: ExtractionPolicy = DEFAULT_POLICY) -> Polarity | None:
    """Return the label mentioned last (or first), or ``None`` if none is mentioned.

    Mentions starting at the same offset go to the lowest label in the
    order negative < neutral < positive.
    """
    best: tuple[int, Polarity] | None = None
    for label, words in policy.keywords.items():
        for word in words:
            for match in re.finditer(re.escape(word), text, re.IGNORECASE):
                pos = match.start()
                if best is None:
                    best = (pos, label)
                elif policy.occurrence is Occurrence.LAST:
                    if pos > best[0] or (pos == best[0] and label < best[1]):
                        best = (pos, label)
                elif pos < best[0] or (pos == best[0] and label < best[1]):
                    best = (pos, label)
                if policy.occurrence is Occurrence.FIRST:
                    break
    return best[1] if best else None


def resolve_unparseable(fallback: Fallback = Fallback.COUNT_AS_WRONG) -> Polarity | None:
    """Label assigned to an unparseable completion; ``None`` keeps it in the "none" column."""
    if fallback is Fallback.ASSIGN_NEUTRAL:
        return Polarity.NEUTRAL
    return None


def unparseable_rate(unparseable: int, total: int) -> float:
    return unparseable / total if total else 0.0

"""Aspect-sentiment datasets with implicit-sentiment flags.

Two on-disk formats are understood:

* SemEval-2014 ABSA XML (``<sentences><sentence><text/><aspectTerms/>``).
  The official test files carry no implicit flag; flags come from a separate
  overlay file (JSONL of ``{"id": ..., "is_implicit": ...}``).
* Instance JSONL, one object per line with keys ``id, text, target, gold,
  is_implicit, dataset``. This is the canonical interchange format.

Instance ids for XML input are ``"<sentence id>#<k>"`` where ``k`` is the
zero-based position of the aspect term inside its sentence.
"""

from __future__ import annotations

import enum
import json
import logging
import warnings
import xml.etree.ElementTree as ET
from collections import Counter
from dataclasses import dataclass, field, fields, replace
from decimal import Decimal
from pathlib import Path
from typing import Iterable, Mapping

logger = logging.getLogger(__name__)


class CorpusError(ValueError):
    """Raised for malformed dataset or flag files."""


class SkippedRecordWarning(UserWarning):
    """Emitted once per aspect term dropped during parsing (e.g. ``conflict``)."""


class Polarity(enum.IntEnum):
    """Three-way sentiment label; the integer order is the tie-break order."""

    NEGATIVE = 0
    NEUTRAL = 1
    POSITIVE = 2

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value: str) -> Polarity:
        try:
            return cls[value.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown polarity {value!r}") from None


class DatasetName(enum.Enum):
    RESTAURANT = "restaurant"
    LAPTOP = "laptop"


@dataclass(frozen=True)
class SentimentInstance:
    id: str
    text: str
    target: str
    gold: Polarity
    is_implicit: bool
    dataset: DatasetName

    def __post_init__(self) -> None:
        if not self.text:
            raise CorpusError(f"instance {self.id!r} has empty text")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "text": self.text,
            "target": self.target,
            "gold": self.gold.label,
            "is_implicit": self.is_implicit,
            "dataset": self.dataset.value,
        }


@dataclass(frozen=True)
class DatasetSummary:
    """Label distribution and implicit-sentiment share of one dataset.

    ``isa_percent`` is truncated (not rounded) to two decimals.
    """

    negative: int = 0
    positive: int = 0
    neutral: int = 0
    total: int = 0
    isa_count: int = 0
    isa_percent: Decimal = Decimal("0.00")

    def to_dict(self) -> dict:
        return {
            "negative": self.negative,
            "positive": self.positive,
            "neutral": self.neutral,
            "total": self.total,
            "isa_count": self.isa_count,
            "isa_percent": str(self.isa_percent),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> DatasetSummary:
        return cls(
            negative=int(data["negative"]),
            positive=int(data["positive"]),
            neutral=int(data["neutral"]),
            total=int(data["total"]),
            isa_count=int(data["isa_count"]),
            isa_percent=Decimal(str(data["isa_percent"])).quantize(Decimal("0.01")),
        )


# Published test-split distribution used to guard against corrupted inputs.
PUBLISHED_SUMMARIES: dict[DatasetName, DatasetSummary] = {
    DatasetName.RESTAURANT: DatasetSummary(
        negative=196, positive=728, neutral=196, total=1120,
        isa_count=267, isa_percent=Decimal("23.83"),
    ),
    DatasetName.LAPTOP: DatasetSummary(
        negative=128, positive=341, neutral=169, total=638,
        isa_count=175, isa_percent=Decimal("27.42"),
    ),
}


def truncated_percent(part: int, whole: int) -> Decimal:
    """Return ``100 * part / whole`` truncated toward zero to 2 decimals."""
    if whole == 0:
        return Decimal("0.00")
    hundredths = (10000 * part) // whole
    return (Decimal(hundredths) / 100).quantize(Decimal("0.01"))


def _check_unique(instances: Iterable[SentimentInstance]) -> None:
    seen: set[str] = set()
    for inst in instances:
        if inst.id in seen:
            raise CorpusError(f"duplicate instance id {inst.id!r}")
        seen.add(inst.id)


def parse_semeval_xml(data: bytes, dataset: DatasetName = DatasetName.RESTAURANT) -> list[SentimentInstance]:
    """Parse SemEval-2014 ABSA XML into one instance per aspect term.

    Aspect terms whose polarity is not positive/negative/neutral (the
    ``conflict`` label) are dropped with a :class:`SkippedRecordWarning`.
    An ``implicit_sentiment`` attribute on an aspect term, as found in
    implicit-annotated redistributions of the test sets, is honoured;
    otherwise ``is_implicit`` is False until an overlay is applied.
    """
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        line, column = exc.position
        raise CorpusError(f"malformed XML at line {line}, column {column}: {exc}") from exc

    instances: list[SentimentInstance] = []
    for sentence in root.iter("sentence"):
        sid = sentence.get("id")
        if sid is None:
            raise CorpusError("sentence element without id attribute")
        text = (sentence.findtext("text") or "").strip()
        terms = sentence.find("aspectTerms")
        if terms is None:
            continue
        for k, term in enumerate(terms.findall("aspectTerm")):
            iid = f"{sid}#{k}"
            raw_polarity = term.get("polarity", "")
            try:
                gold = Polarity.parse(raw_polarity)
            except ValueError:
                warnings.warn(
                    f"skipping {iid}: unsupported polarity {raw_polarity!r}",
                    SkippedRecordWarning,
                    stacklevel=2,
                )
                continue
            target = term.get("term", "")
            if target == "NULL":
                target = ""
            implicit_attr = term.get("implicit_sentiment")
            is_implicit = implicit_attr is not None and implicit_attr.strip().lower() == "true"
            if not text:
                raise CorpusError(f"sentence {sid!r} has empty text")
            instances.append(SentimentInstance(iid, text, target, gold, is_implicit, dataset))
    _check_unique(instances)
    return instances


_JSONL_KEYS = ("id", "text", "target", "gold", "is_implicit", "dataset")


def _instance_from_obj(obj: Mapping, lineno: int) -> SentimentInstance:
    for key in _JSONL_KEYS:
        if key not in obj:
            raise CorpusError(f"line {lineno}: missing key {key!r}")
    try:
        gold = Polarity.parse(obj["gold"])
    except (ValueError, AttributeError):
        raise CorpusError(f"line {lineno}: key 'gold' has bad value {obj['gold']!r}") from None
    try:
        dataset = DatasetName(obj["dataset"])
    except ValueError:
        raise CorpusError(f"line {lineno}: key 'dataset' has bad value {obj['dataset']!r}") from None
    if not isinstance(obj["is_implicit"], bool):
        raise CorpusError(f"line {lineno}: key 'is_implicit' must be a boolean")
    for key in ("id", "text", "target"):
        if not isinstance(obj[key], str):
            raise CorpusError(f"line {lineno}: key {key!r} must be a string")
    if not obj["text"]:
        raise CorpusError(f"line {lineno}: key 'text' is empty")
    return SentimentInstance(obj["id"], obj["text"], obj["target"], gold, obj["is_implicit"], dataset)


def _iter_json_lines(data: bytes):
    for lineno, line in enumerate(data.decode("utf-8").split("\n"), start=1):
        if not line.strip():
            continue
        try:
            yield lineno, json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"line {lineno}: invalid JSON ({exc.msg})") from exc


def parse_jsonl(data: bytes) -> list[SentimentInstance]:
    instances = []
    seen: dict[str, int] = {}
    for lineno, obj in _iter_json_lines(data):
        if not isinstance(obj, dict):
            raise CorpusError(f"line {lineno}: expected a JSON object")
        inst = _instance_from_obj(obj, lineno)
        if inst.id in seen:
            raise CorpusError(f"line {lineno}: duplicate id {inst.id!r} (first seen on line {seen[inst.id]})")
        seen[inst.id] = lineno
        instances.append(inst)
    return instances


def serialize_jsonl(instances: Iterable[SentimentInstance]) -> bytes:
    lines = [json.dumps(inst.to_dict(), ensure_ascii=False) + "\n" for inst in instances]
    return "".join(lines).encode("utf-8")


def parse_flags_jsonl(data: bytes) -> dict[str, bool]:
    """Parse an implicit-flag overlay file into ``{id: is_implicit}``."""
    flags: dict[str, bool] = {}
    for lineno, obj in _iter_json_lines(data):
        if not isinstance(obj, dict) or "id" not in obj or "is_implicit" not in obj:
            raise CorpusError(f"line {lineno}: expected object with keys 'id' and 'is_implicit'")
        if not isinstance(obj["is_implicit"], bool):
            raise CorpusError(f"line {lineno}: key 'is_implicit' must be a boolean")
        if obj["id"] in flags:
            raise CorpusError(f"line {lineno}: duplicate id {obj['id']!r}")
        flags[obj["id"]] = obj["is_implicit"]
    return flags


def overlay_implicit_flags(
    instances: list[SentimentInstance], flags: Mapping[str, bool]
) -> list[SentimentInstance]:
    known = {inst.id for inst in instances}
    unmatched = sorted(set(flags) - known)
    if unmatched:
        raise CorpusError(f"implicit flags reference unknown ids: {', '.join(unmatched)}")
    return [
        replace(inst, is_implicit=flags[inst.id]) if inst.id in flags else inst
        for inst in instances
    ]


def summarize(instances: Iterable[SentimentInstance]) -> DatasetSummary:
    instances = list(instances)
    counts = Counter(inst.gold for inst in instances)
    total = len(instances)
    isa = sum(1 for inst in instances if inst.is_implicit)
    if total == 0:
        logger.warning("summarizing an empty dataset; isa_percent reported as 0.00")
    return DatasetSummary(
        negative=counts[Polarity.NEGATIVE],
        positive=counts[Polarity.POSITIVE],
        neutral=counts[Polarity.NEUTRAL],
        total=total,
        isa_count=isa,
        isa_percent=truncated_percent(isa, total),
    )


@dataclass(frozen=True)
class FieldMismatch:
    field: str
    actual: object
    expected: object


@dataclass(frozen=True)
class ValidationReport:
    mismatches: tuple[FieldMismatch, ...] = field(default_factory=tuple)

    @property
    def passed(self) -> bool:
        return not self.mismatches

    def describe(self) -> str:
        if self.passed:
            return "pass"
        parts = [f"{m.field}: got {m.actual}, expected {m.expected}" for m in self.mismatches]
        return "fail (" + "; ".join(parts) + ")"


def validate_expected(summary: DatasetSummary, expected: DatasetSummary) -> ValidationReport:
    mismatches = tuple(
        FieldMismatch(f.name, getattr(summary, f.name), getattr(expected, f.name))
        for f in fields(DatasetSummary)
        if getattr(summary, f.name) != getattr(expected, f.name)
    )
    return ValidationReport(mismatches)


def load_dataset(
    path: str | Path,
    dataset: DatasetName | None = None,
    flags_path: str | Path | None = None,
) -> list[SentimentInstance]:
    """Load a dataset file by extension (``.xml`` or ``.jsonl``), then apply flags."""
    path = Path(path)
    data = path.read_bytes()
    if path.suffix.lower() == ".xml":
        instances = parse_semeval_xml(data, dataset or DatasetName.RESTAURANT)
    else:
        instances = parse_jsonl(data)
    if flags_path is not None:
        instances = overlay_implicit_flags(instances, parse_flags_jsonl(Path(flags_path).read_bytes()))
    return instances

"""Confusion matrices, macro-F1 per slice, improvement arithmetic, and report tables.

Scores are macro-F1 over the three polarity classes. Precision, recall and
F1 are 0 whenever their denominator is 0. Unparseable predictions (``None``)
occupy a fourth "none" column: they count against recall of the gold class
but never add to any class's precision denominator.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from importlib import resources
from typing import Iterable, Mapping, Sequence

from .chains import ChainKind
from .corpus import DatasetName, Polarity

LABELS = (Polarity.NEGATIVE, Polarity.NEUTRAL, Polarity.POSITIVE)
COLUMNS: tuple[Polarity | None, ...] = (*LABELS, None)
_CENT = Decimal("0.01")


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class PredictionRecord:
    instance_id: str
    gold: Polarity
    predicted: Polarity | None
    is_implicit: bool
    unparseable: bool = False

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "gold": self.gold.label,
            "predicted": self.predicted.label if self.predicted is not None else None,
            "is_implicit": self.is_implicit,
            "unparseable": self.unparseable,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> PredictionRecord:
        predicted = data["predicted"]
        return cls(
            instance_id=data["instance_id"],
            gold=Polarity.parse(data["gold"]),
            predicted=Polarity.parse(predicted) if predicted is not None else None,
            is_implicit=bool(data["is_implicit"]),
            unparseable=bool(data.get("unparseable", False)),
        )


@dataclass(frozen=True)
class ConfusionMatrix:
    """Gold rows (negative, neutral, positive) by predicted columns (same + none)."""

    grid: tuple[tuple[int, int, int, int], ...] = ((0,) * 4,) * 3

    def cell(self, gold: Polarity, predicted: Polarity | None) -> int:
        return self.grid[LABELS.index(gold)][COLUMNS.index(predicted)]

    def row_sum(self, gold: Polarity) -> int:
        return sum(self.grid[LABELS.index(gold)])

    def column_sum(self, predicted: Polarity | None) -> int:
        col = COLUMNS.index(predicted)
        return sum(row[col] for row in self.grid)

    @property
    def total(self) -> int:
        return sum(sum(row) for row in self.grid)


def confusion(records: Iterable[PredictionRecord]) -> ConfusionMatrix:
    grid = [[0] * 4 for _ in LABELS]
    seen: set[str] = set()
    for rec in records:
        if rec.instance_id in seen:
            raise EvaluationError(f"duplicate instance_id {rec.instance_id!r}")
        seen.add(rec.instance_id)
        grid[LABELS.index(rec.gold)][COLUMNS.index(rec.predicted)] += 1
    return ConfusionMatrix(tuple(tuple(row) for row in grid))


@dataclass(frozen=True)
class SliceMetrics:
    accuracy: float
    precision: Mapping[Polarity, float]
    recall: Mapping[Polarity, float]
    per_class_f1: Mapping[Polarity, float]
    macro_f1: float
    support: int

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": {k.label: v for k, v in self.precision.items()},
            "recall": {k.label: v for k, v in self.recall.items()},
            "per_class_f1": {k.label: v for k, v in self.per_class_f1.items()},
            "macro_f1": self.macro_f1,
            "support": self.support,
        }


def _ratio(num: int | float, den: int | float) -> float:
    return num / den if den else 0.0


def slice_metrics(cm: ConfusionMatrix) -> SliceMetrics:
    precision, recall, f1 = {}, {}, {}
    for label in LABELS:
        tp = cm.cell(label, label)
        p = _ratio(tp, cm.column_sum(label))
        r = _ratio(tp, cm.row_sum(label))
        precision[label], recall[label] = p, r
        f1[label] = _ratio(2 * p * r, p + r)
    support = cm.total
    correct = sum(cm.cell(label, label) for label in LABELS)
    return SliceMetrics(
        accuracy=_ratio(correct, support),
        precision=precision,
        recall=recall,
        per_class_f1=f1,
        macro_f1=sum(f1.values()) / len(LABELS),
        support=support,
    )


def split_slices(records: Iterable[PredictionRecord]) -> tuple[list[PredictionRecord], list[PredictionRecord]]:
    """Partition into (implicit, explicit) records."""
    isa, esa = [], []
    for rec in records:
        (isa if rec.is_implicit else esa).append(rec)
    return isa, esa


@dataclass(frozen=True)
class EvalReport:
    all: SliceMetrics
    isa: SliceMetrics
    esa: SliceMetrics
    unparseable_count: int
    unparseable_rate: float
    fingerprint: str = ""
    confusion: ConfusionMatrix = field(default_factory=ConfusionMatrix)

    def to_dict(self) -> dict:
        return {
            "all": self.all.to_dict(),
            "isa": self.isa.to_dict(),
            "esa": self.esa.to_dict(),
            "unparseable_count": self.unparseable_count,
            "unparseable_rate": self.unparseable_rate,
            "fingerprint": self.fingerprint,
            "confusion": {
                "rows": [label.label for label in LABELS],
                "columns": [c.label if c is not None else "none" for c in COLUMNS],
                "grid": [list(row) for row in self.confusion.grid],
            },
            "conventions": "macro-F1 over 3 classes; 0 for undefined precision/recall/F1",
        }


def evaluate(records: Sequence[PredictionRecord], fingerprint: str = "") -> EvalReport:
    records = sorted(records, key=lambda r: r.instance_id)
    isa, esa = split_slices(records)
    cm = confusion(records)
    n_bad = sum(1 for r in records if r.unparseable)
    return EvalReport(
        all=slice_metrics(cm),
        isa=slice_metrics(confusion(isa)),
        esa=slice_metrics(confusion(esa)),
        unparseable_count=n_bad,
        unparseable_rate=_ratio(n_bad, len(records)),
        fingerprint=fingerprint,
        confusion=cm,
    )


def as_percent(score: float) -> Decimal:
    """Scale a [0, 1] score to a percentage with 2 decimals."""
    return (Decimal(repr(score)) * 100).quantize(_CENT, rounding=ROUND_HALF_UP)


def improvement_delta(score_a: float | str | Decimal, score_b: float | str | Decimal) -> Decimal:
    """Percentage-point difference ``a - b`` to 2 decimals."""
    return (Decimal(str(score_a)) - Decimal(str(score_b))).quantize(_CENT, rounding=ROUND_HALF_UP)


def average_improvement(deltas: Sequence[float | str | Decimal]) -> Decimal:
    if not deltas:
        raise EvaluationError("average_improvement needs at least one delta")
    total = sum((Decimal(str(d)) for d in deltas), Decimal(0))
    return (total / len(deltas)).quantize(_CENT, rounding=ROUND_HALF_UP)


# ---------------------------------------------------------------- reporting

SCORE_COLUMNS = (
    (DatasetName.RESTAURANT, "f1"),
    (DatasetName.RESTAURANT, "isa"),
    (DatasetName.LAPTOP, "f1"),
    (DatasetName.LAPTOP, "isa"),
)
CSV_HEADER = ["section", "method", "restaurant_f1", "restaurant_isa", "laptop_f1", "laptop_isa"]

SECTION_BASELINES = "State-of-the-art baselines"
SECTION_PROMPT = "Prompt-based methods"
SECTION_COT = "CoT-based methods"

_CHAIN_SUFFIX = {ChainKind.DIRECT: "Prompt", ChainKind.THOR: "THOR", ChainKind.SAOT: "SAoT"}


@dataclass(frozen=True)
class BaselineRow:
    method: str
    scores: tuple[Decimal, Decimal, Decimal, Decimal]

    @property
    def label(self) -> str:
        return f"{self.method}†"


def load_baselines(text: str | None = None) -> list[BaselineRow]:
    """Parse the baseline CSV (``#`` lines are comments); defaults to the bundled file."""
    if text is None:
        text = (resources.files("isa_harness") / "data" / "baselines.csv").read_text(encoding="utf-8")
    lines = [line for line in text.splitlines() if line.strip() and not line.lstrip().startswith("#")]
    rows = []
    for rec in csv.DictReader(lines):
        scores = tuple(Decimal(rec[f"{ds.value}_{kind}"]) for ds, kind in SCORE_COLUMNS)
        rows.append(BaselineRow(rec["method"], scores))
    return rows


def method_label(model: str, chain: ChainKind) -> str:
    return f"{model}+{_CHAIN_SUFFIX[chain]}"


ReportKey = tuple[str, ChainKind]


@dataclass(frozen=True)
class RenderedReport:
    text: str
    csv: str


def _experiment_scores(per_dataset: Mapping[DatasetName, EvalReport]) -> tuple[Decimal | None, ...]:
    out: list[Decimal | None] = []
    for ds, kind in SCORE_COLUMNS:
        rep = per_dataset.get(ds)
        if rep is None:
            out.append(None)
        else:
            out.append(as_percent(rep.all.macro_f1 if kind == "f1" else rep.isa.macro_f1))
    return tuple(out)


def _table_rows(
    reports: Mapping[ReportKey, Mapping[DatasetName, EvalReport]],
    baselines: Sequence[BaselineRow],
) -> list[tuple[str, str, tuple[Decimal | None, ...]]]:
    rows = [(SECTION_BASELINES, b.label, b.scores) for b in baselines]
    for section, kinds in ((SECTION_PROMPT, (ChainKind.DIRECT,)), (SECTION_COT, (ChainKind.THOR, ChainKind.SAOT))):
        for kind in kinds:
            for (model, chain), per_dataset in reports.items():
                if chain is kind:
                    rows.append((section, method_label(model, chain), _experiment_scores(per_dataset)))
    return rows


def _fmt(value: Decimal | None) -> str:
    return "-" if value is None else f"{value:.2f}"


def render_report(
    reports: Mapping[ReportKey, Mapping[DatasetName, EvalReport]],
    baselines: Sequence[BaselineRow] | None = None,
) -> RenderedReport:
    """Render a zero-shot results table (text with best-per-column bolded, and CSV).

    ``reports`` maps ``(model label, chain)`` to per-dataset reports; rows keep
    the mapping's order within their section.
    """
    if baselines is None:
        baselines = load_baselines()
    rows = _table_rows(reports, baselines)

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for section, label, scores in rows:
        writer.writerow([section, label, *(_fmt(s) for s in scores)])

    best = []
    for col in range(len(SCORE_COLUMNS)):
        values = [scores[col] for _, _, scores in rows if scores[col] is not None]
        best.append(max(values) if values else None)

    width = max([len(label) for _, label, _ in rows] + [len("Method")]) + 2
    cell = 11
    lines = [
        "Method".ljust(width) + "Restaurant".ljust(2 * cell) + "Laptop",
        "".ljust(width) + "".join(h.ljust(cell) for h in ("F1", "ISA", "F1", "ISA")).rstrip(),
    ]
    current = None
    for section, label, scores in rows:
        if section != current:
            lines.append(f"• {section}")
            current = section
        cells = []
        for col, value in enumerate(scores):
            text = _fmt(value)
            if value is not None and value == best[col]:
                text = f"**{text}**"
            cells.append(text.ljust(cell))
        lines.append((label.ljust(width) + "".join(cells)).rstrip())
    if any(section == SECTION_BASELINES for section, _, _ in rows):
        lines.append("† cited constants, not recomputed.")
    return RenderedReport(text="\n".join(lines) + "\n", csv=buf.getvalue())


def render_split_view(reports: Mapping[ReportKey, Mapping[DatasetName, EvalReport]]) -> RenderedReport:
    """Explicit vs implicit slice comparison (macro-F1 on ESA, ISA and all instances)."""
    header = ["method", "dataset", "esa_f1", "isa_f1", "all_f1", "esa_support", "isa_support"]
    rows = []
    for (model, chain), per_dataset in reports.items():
        for ds in DatasetName:
            rep = per_dataset.get(ds)
            if rep is None:
                continue
            rows.append([
                method_label(model, chain), ds.value,
                _fmt(as_percent(rep.esa.macro_f1)), _fmt(as_percent(rep.isa.macro_f1)),
                _fmt(as_percent(rep.all.macro_f1)), str(rep.esa.support), str(rep.isa.support),
            ])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    widths = [max(len(r[i]) for r in [header, *rows]) + 2 for i in range(len(header))]
    text = "\n".join("".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in [header, *rows])
    return RenderedReport(text=text + "\n", csv=buf.getvalue())


def render_delta_block(
    reports: Mapping[ReportKey, Mapping[DatasetName, EvalReport]],
    baselines: Sequence[BaselineRow] | None = None,
    reference: str = "BERT_Asp+SCAPT",
) -> str:
    """F1 improvement of each experiment over a reference baseline, per dataset and averaged."""
    if baselines is None:
        baselines = load_baselines()
    ref = next((b for b in baselines if b.method == reference), None)
    if ref is None:
        raise EvaluationError(f"unknown reference baseline {reference!r}")
    ref_f1 = {DatasetName.RESTAURANT: ref.scores[0], DatasetName.LAPTOP: ref.scores[2]}
    lines = [f"F1 improvement over {reference}:"]
    for (model, chain), per_dataset in reports.items():
        parts, deltas = [], []
        for ds in DatasetName:
            rep = per_dataset.get(ds)
            if rep is None:
                continue
            score = as_percent(rep.all.macro_f1)
            delta = improvement_delta(score, ref_f1[ds])
            deltas.append(delta)
            parts.append(f"{ds.value} {delta:+.2f} (= {score:.2f} - {ref_f1[ds]:.2f})")
        if not deltas:
            continue
        avg = average_improvement(deltas)
        lines.append(f"  {method_label(model, chain)}: " + "; ".join(parts) + f"; average {avg:+.2f}")
    return "\n".join(lines) + "\n"

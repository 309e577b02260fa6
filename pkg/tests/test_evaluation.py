from __future__ import annotations

import random
from decimal import Decimal
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from isa_harness.chains import ChainKind
from isa_harness.corpus import DatasetName, Polarity
from isa_harness.evaluation import (
    LABELS,
    ConfusionMatrix,
    EvaluationError,
    PredictionRecord,
    as_percent,
    average_improvement,
    confusion,
    evaluate,
    improvement_delta,
    load_baselines,
    render_delta_block,
    render_report,
    render_split_view,
    slice_metrics,
    split_slices,
)

from .oracles import brute_force_metrics, random_records

NEG, NEU, POS = Polarity.NEGATIVE, Polarity.NEUTRAL, Polarity.POSITIVE

BASELINE_CSV = (
    "section,method,restaurant_f1,restaurant_isa,laptop_f1,laptop_isa\n"
    "State-of-the-art baselines,BERT+SPC†,21.76,19.48,25.34,17.71\n"
    "State-of-the-art baselines,BERT+RGAT†,27.48,22.04,25.68,18.26\n"
    "State-of-the-art baselines,BERT_Asp+SCAPT†,30.02,25.49,25.77,13.70\n"
)


def rec(i, gold, pred, implicit=False):
    return PredictionRecord(f"r{i}", gold, pred, implicit, unparseable=pred is None)


def records_from_grid(grid):
    out = []
    for gold, row in zip(LABELS, grid):
        for pred, n in zip((NEG, NEU, POS, None), row):
            out.extend(rec(len(out), gold, pred) for _ in range(n))
    return out


# -------------------------------------------------------------- confusion


def test_confusion_all_correct_positive():
    cm = confusion([rec(i, POS, POS) for i in range(3)])
    assert cm.cell(POS, POS) == 3 and cm.total == 3


def test_confusion_empty():
    assert confusion([]) == ConfusionMatrix()


def test_confusion_all_pairs_once():
    records = [rec(3 * a + b, g, p) for a, g in enumerate(LABELS) for b, p in enumerate(LABELS)]
    cm = confusion(records)
    assert [list(row[:3]) for row in cm.grid] == [[1, 1, 1]] * 3
    assert cm.column_sum(None) == 0


def test_confusion_none_column_and_duplicates():
    assert confusion([rec(0, NEG, None)]).cell(NEG, None) == 1
    with pytest.raises(EvaluationError, match="duplicate"):
        confusion([rec(0, NEG, NEG), rec(0, POS, POS)])


# ---------------------------------------------------------------- metrics


@pytest.mark.parametrize("counts", [(1, 1, 1), (5, 0, 2), (0, 0, 7)])
def test_perfect_predictions(counts):
    records = [rec(f"{g.name}{k}", g, g) for g, n in zip(LABELS, counts) for k in range(n)]
    m = slice_metrics(confusion(records))
    assert m.accuracy == 1.0
    # A class absent from gold and predictions scores 0 under the zero-denominator rule.
    assert m.macro_f1 == pytest.approx(sum(1 for n in counts if n) / 3)


def test_perfect_predictions_balanced_is_one():
    m = slice_metrics(confusion([rec(i, g, g) for i, g in enumerate(LABELS * 4)]))
    assert m.macro_f1 == 1.0 and m.accuracy == 1.0


def test_all_none_predictions_score_zero():
    m = slice_metrics(confusion([rec(i, g, None) for i, g in enumerate(LABELS * 3)]))
    assert m.macro_f1 == 0.0 and m.accuracy == 0.0


def test_worked_matrix_matches_frozen_oracle_values():
    grid = [[8, 1, 1, 0], [2, 6, 2, 0], [0, 1, 9, 0]]
    records = records_from_grid(grid)
    # Frozen from brute_force_metrics before the metric code was run on this case.
    frozen_f1 = {NEG: Fraction(4, 5), NEU: Fraction(2, 3), POS: Fraction(9, 11)}
    frozen_macro, frozen_acc = Fraction(377, 495), Fraction(23, 30)
    acc, f1, macro = brute_force_metrics([(r.gold, r.predicted) for r in records])
    assert (acc, f1, macro) == (frozen_acc, frozen_f1, frozen_macro)

    m = slice_metrics(confusion(records))
    for label in LABELS:
        assert abs(m.per_class_f1[label] - float(frozen_f1[label])) < 1e-9
    assert abs(m.macro_f1 - float(frozen_macro)) < 1e-9
    assert abs(m.accuracy - float(frozen_acc)) < 1e-9


@pytest.mark.parametrize("seed", range(25))
def test_metrics_match_brute_force(seed):
    records = random_records(random.Random(seed))
    acc, f1, macro = brute_force_metrics([(r.gold, r.predicted) for r in records])
    m = slice_metrics(confusion(records))
    assert abs(m.accuracy - float(acc)) < 1e-9
    assert abs(m.macro_f1 - float(macro)) < 1e-9
    for label in LABELS:
        assert abs(m.per_class_f1[label] - float(f1[label])) < 1e-9


@given(st.randoms(use_true_random=False))
def test_metrics_permutation_invariant_and_bounded(rnd):
    records = random_records(rnd)
    shuffled = list(records)
    rnd.shuffle(shuffled)
    a, b = evaluate(records), evaluate(shuffled)
    assert a == b
    for s in (a.all, a.isa, a.esa):
        assert 0 <= s.macro_f1 <= 1 and 0 <= s.accuracy <= 1
        assert Decimal(0) <= as_percent(s.macro_f1) <= Decimal(100)
        assert s.macro_f1 == pytest.approx(sum(s.per_class_f1.values()) / 3)
    assert a.isa.support + a.esa.support == a.all.support == len(records)


# ----------------------------------------------------------------- slices


def test_split_all_explicit():
    isa, esa = split_slices([rec(i, POS, POS, False) for i in range(4)])
    assert isa == [] and len(esa) == 4


@given(st.randoms(use_true_random=False))
def test_split_partition_law(rnd):
    records = random_records(rnd)
    isa, esa = split_slices(records)
    assert len(isa) + len(esa) == len(records)
    assert all(r.is_implicit for r in isa) and not any(r.is_implicit for r in esa)


# ------------------------------------------------------------- arithmetic


def test_improvement_deltas_reference_values():
    assert improvement_delta(75.27, 30.02) == Decimal("45.25")
    assert improvement_delta(76.50, 25.77) == Decimal("50.73")
    assert average_improvement([Decimal("45.25"), Decimal("50.73")]) == Decimal("47.99")


def test_improvement_trivial_cases():
    assert improvement_delta(12.34, 12.34) == Decimal("0.00")
    assert average_improvement([7.5]) == Decimal("7.50")
    assert average_improvement([0, 10]) == Decimal("5.00")
    with pytest.raises(EvaluationError):
        average_improvement([])


@given(
    st.decimals(0, 100, places=2, allow_nan=False),
    st.decimals(0, 100, places=2, allow_nan=False),
)
def test_delta_antisymmetric(a, b):
    assert improvement_delta(a, b) == -improvement_delta(b, a)


# ---------------------------------------------------------------- reports


def test_baselines_fixture_values():
    rows = {b.method: b.scores for b in load_baselines()}
    assert rows["BERT_Asp+SCAPT"] == (Decimal("30.02"), Decimal("25.49"), Decimal("25.77"), Decimal("13.70"))
    assert len(rows) == 3


def test_render_baselines_only_csv():
    assert render_report({}).csv == BASELINE_CSV


def test_render_text_bolds_best_and_groups_sections():
    text = render_report({}).text
    assert "• State-of-the-art baselines" in text
    assert "**30.02**" in text and "**13.70**" not in text and "**18.26**" in text
    assert "Prompt-based" not in text


def _report(explicit_wrong: int = 0):
    """Every class present in both slices; ``explicit_wrong`` explicit records mispredicted."""
    records = [rec(f"e{i}", g, g) for i, g in enumerate(LABELS)]
    records += [rec(f"i{i}", g, g, True) for i, g in enumerate(LABELS)]
    records += [rec(f"w{i}", POS, NEG) for i in range(explicit_wrong)]
    return evaluate(records)


def test_render_adds_one_row_per_experiment():
    reports = {("mock", ChainKind.SAOT): {DatasetName.RESTAURANT: _report()}}
    out = render_report(reports)
    lines = out.csv.splitlines()
    assert len(lines) == 5
    assert {len(line.split(",")) for line in lines} == {6}
    assert lines[-1] == "CoT-based methods,mock+SAoT,100.00,100.00,-,-"
    assert "**100.00**" in out.text


def test_render_orders_prompt_before_cot_sections():
    reports = {
        ("m", ChainKind.SAOT): {DatasetName.LAPTOP: _report(2)},
        ("m", ChainKind.DIRECT): {DatasetName.LAPTOP: _report(1)},
        ("m", ChainKind.THOR): {DatasetName.LAPTOP: _report(3)},
    }
    methods = [line.split(",")[1] for line in render_report(reports).csv.splitlines()[4:]]
    assert methods == ["m+Prompt", "m+THOR", "m+SAoT"]


def test_split_view_and_delta_block():
    reports = {("mock", ChainKind.DIRECT): {DatasetName.RESTAURANT: _report(), DatasetName.LAPTOP: _report()}}
    view = render_split_view(reports)
    assert view.csv.splitlines()[1] == "mock+Prompt,restaurant,100.00,100.00,100.00,3,3"
    block = render_delta_block(reports)
    assert "restaurant +69.98 (= 100.00 - 30.02)" in block
    assert "laptop +74.23 (= 100.00 - 25.77)" in block
    assert "average +72.11" in block  # (69.98 + 74.23) / 2 = 72.105 -> half-up
    with pytest.raises(EvaluationError):
        render_delta_block(reports, reference="nope")

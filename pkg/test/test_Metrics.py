import random
from fractions import Fraction
from types import SimpleNamespace

import pytest

from attribution_utils.benchmarks.Metrics import (MetricBundle, aggregate, answer_accuracy, attribution_scores,
                                                  compute_bundle, coverage, f1_score, over_citation_rate,
                                                  per_modality_precision)
from attribution_utils.benchmarks.ResultsProcessor import as_percent
from attribution_utils.core.Citations import Citation, Modality, TimeSpan
from attribution_utils.core.EvalPipeline import (AttributionJudgments, FactJudgment, SentenceMark,
                                                 VerifiabilityMarks)


def marks_of(*pairs):
    return VerifiabilityMarks(tuple(SentenceMark(i, v, c) for i, (v, c) in enumerate(pairs)))


def citations(*modalities):
    return tuple(Citation(Modality(m), TimeSpan(i, i + 1)) for i, m in enumerate(modalities))


def judgment(supported, relevant, modalities=None):
    modalities = modalities or ["visual"] * len(relevant)
    return FactJudgment(citations(*modalities), supported, tuple(relevant))


def random_fixture(rng):
    marks = marks_of(*[(rng.random() < 0.6, rng.random() < 0.5) for _ in range(rng.randint(0, 8))])
    facts = []
    for _ in range(rng.randint(0, 6)):
        n = rng.randint(1, 4)
        modalities = [rng.choice(["visual", "audio"]) for _ in range(n)]
        supported = rng.random() < 0.6
        if not supported:
            relevant = [False] * n
        elif n == 1:
            relevant = [True]
        else:
            relevant = [rng.random() < 0.5 for _ in range(n)]
        facts.append(judgment(supported, relevant, modalities))
    return marks, AttributionJudgments(tuple(facts))


def brute_force(marks, judgments):
    """Direct evaluation of the summations: (coverage, precision, recall, f1, grounding)."""
    verifiable = cited_verifiable = 0
    for m in marks.marks:
        if m.verifiable:
            verifiable += 1
            if m.cited:
                cited_verifiable += 1
    cov = Fraction(cited_verifiable, verifiable) if verifiable else None
    if not judgments.facts:
        return cov, None, None, None, (None if cov is None else Fraction(0))
    relevant_total = citation_total = supported = 0
    for fact in judgments.facts:
        supported += 1 if fact.supported else 0
        for flag in fact.relevant:
            citation_total += 1
            relevant_total += 1 if flag else 0
    precision = Fraction(relevant_total, citation_total)
    recall = Fraction(supported, len(judgments.facts))
    f1 = Fraction(0) if precision * recall == 0 else 2 * precision * recall / (precision + recall)
    return cov, precision, recall, f1, (None if cov is None else cov * f1)


def test_worked_example():
    j = AttributionJudgments((judgment(True, [True]), judgment(True, [True, False]), judgment(False, [False])))
    precision, recall, f1 = attribution_scores(j)
    assert (precision, recall, f1) == (Fraction(1, 2), Fraction(2, 3), Fraction(4, 7))


def test_oracle_equivalence():
    rng = random.Random(2024)
    for _ in range(500):
        marks, judgments = random_fixture(rng)
        bundle = compute_bundle(marks, judgments)
        expected = brute_force(marks, judgments)
        assert (bundle.coverage, bundle.precision, bundle.recall, bundle.f1, bundle.grounding_score) == expected


def test_metric_identities():
    rng = random.Random(99)
    for _ in range(300):
        marks, judgments = random_fixture(rng)
        bundle = compute_bundle(marks, judgments)
        if bundle.grounding_score is not None and bundle.f1 is not None:
            assert bundle.grounding_score <= min(bundle.coverage, bundle.f1)
        if bundle.f1 is not None:
            assert (bundle.f1 == 0) == (bundle.precision * bundle.recall == 0)
        if bundle.precision is not None:
            per_modality, counts = per_modality_precision(judgments)
            pooled = sum((per_modality[m] * counts[m] for m in counts if counts[m]), Fraction(0))
            assert pooled / sum(counts.values()) == bundle.precision


def test_undefined_values():
    empty = AttributionJudgments()
    assert coverage(marks_of()) is None
    assert coverage(marks_of((False, True))) is None
    bundle = compute_bundle(marks_of((True, False)), empty)
    assert bundle.coverage == 0
    assert bundle.precision is None and bundle.f1 is None
    assert bundle.grounding_score == 0
    assert compute_bundle(marks_of((False, False)), empty).grounding_score is None
    assert f1_score(None, Fraction(1)) is None


def test_over_citation_rate():
    marks = marks_of(*([(False, True)] * 3 + [(False, False)] * 34 + [(True, True)] * 5))
    rate = over_citation_rate(marks)
    assert rate == Fraction(3, 37)
    assert as_percent(float(rate)) == "8.1"


def test_answer_accuracy():
    assert answer_accuracy("b", "B")
    assert not answer_accuracy(None, "B")
    with pytest.raises(ValueError):
        answer_accuracy("A", "F")


def test_bundle_serialization_keeps_undefined():
    bundle = compute_bundle(marks_of((True, True)), AttributionJudgments((judgment(True, [True, False]),)),
                            answer_letter="A", gold_answer="A")
    data = bundle.to_dict()
    assert data["precision"] == 0.5
    assert data["answer_correct"] is True
    assert data["per_modality_counts"] == {"visual": 2, "audio": 0}
    assert data["per_modality_precision"]["audio"] is None
    assert MetricBundle.from_dict(data).precision == Fraction(1, 2)


def test_aggregate_macro_means():
    first = MetricBundle(coverage=Fraction(1), precision=Fraction(1, 2), recall=Fraction(1), f1=Fraction(2, 3),
                         grounding_score=Fraction(2, 3), per_modality_precision={"visual": Fraction(1, 2), "audio": None},
                         per_modality_counts={"visual": 2, "audio": 0}, answer_correct=True,
                         over_citation_rate=Fraction(0))
    second = MetricBundle(coverage=Fraction(1, 2), grounding_score=Fraction(0),
                          per_modality_precision={"visual": None, "audio": None},
                          per_modality_counts={"visual": 0, "audio": 0}, answer_correct=False)
    report = aggregate([SimpleNamespace(metrics=first), SimpleNamespace(metrics=second)], skipped=1)
    assert report.means["coverage"] == 0.75
    assert report.means["precision"] == 0.5
    assert report.defined["precision"] == 1
    assert report.means["grounding_score"] == pytest.approx(1 / 3)
    assert report.per_modality_precision == {"visual": 0.5, "audio": None}
    assert report.per_modality_counts == {"visual": 2, "audio": 0}
    assert report.accuracy == 0.5
    assert (report.responses, report.skipped, report.undefined_attribution) == (2, 1, 1)
    assert report.to_dict()["counts"]["graded"] == 2

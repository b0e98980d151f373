"""Metric math over pipeline outputs.

Values are exact ``Fraction`` objects in [0, 1] while computing; ``None``
means undefined. Floats appear only in serialized bundles and percentages
only in rendered reports.
"""

from dataclasses import dataclass, field
from fractions import Fraction
from typing import TYPE_CHECKING, Any, Dict, Iterable, List, Optional, Sequence, Tuple

from ..core.Citations import Modality

if TYPE_CHECKING:
    from ..core.EvalPipeline import AttributionJudgments, EvalRecord, VerifiabilityMarks

Ratio = Optional[Fraction]
ANSWER_LETTERS = "ABCDE"
BUNDLE_FIELDS = ("coverage", "precision", "recall", "f1", "grounding_score", "over_citation_rate")


def _ratio(numerator: int, denominator: int) -> Ratio:
    return Fraction(numerator, denominator) if denominator else None


def _as_float(value: Ratio) -> Optional[float]:
    return None if value is None else float(value)


def _as_fraction(value: Optional[float]) -> Ratio:
    return None if value is None else Fraction(value).limit_denominator(10 ** 9)


def coverage(marks: "VerifiabilityMarks") -> Ratio:
    """Share of verifiable sentences that carry a citation."""
    verifiable = [m for m in marks.marks if m.verifiable]
    return _ratio(sum(1 for m in verifiable if m.cited), len(verifiable))


def attribution_scores(j: "AttributionJudgments") -> Tuple[Ratio, Ratio, Ratio]:
    """Pooled precision over all citations, recall over facts, and their F1."""
    if not j.facts:
        return None, None, None
    relevant = sum(sum(f.relevant) for f in j.facts)
    total_citations = sum(len(f.citations) for f in j.facts)
    precision = _ratio(relevant, total_citations)
    recall = Fraction(sum(1 for f in j.facts if f.supported), len(j.facts))
    return precision, recall, f1_score(precision, recall)


def f1_score(precision: Ratio, recall: Ratio) -> Ratio:
    if precision is None or recall is None:
        return None
    if precision == 0 or recall == 0:
        return Fraction(0)
    return 2 * precision * recall / (precision + recall)


def grounding_score(coverage_value: Ratio, f1: Ratio) -> Ratio:
    """Coverage scaled attribution F1; zero when nothing could be attributed."""
    if coverage_value is None:
        return None
    if f1 is None:
        return Fraction(0)
    return coverage_value * f1


def per_modality_precision(j: "AttributionJudgments") -> Tuple[Dict[str, Ratio], Dict[str, int]]:
    relevant = {m.value: 0 for m in Modality}
    counts = {m.value: 0 for m in Modality}
    for fact in j.facts:
        for citation, is_relevant in zip(fact.citations, fact.relevant):
            counts[citation.modality.value] += 1
            relevant[citation.modality.value] += int(is_relevant)
    return {m: _ratio(relevant[m], counts[m]) for m in counts}, counts


def answer_accuracy(pred: Optional[str], gold: str) -> bool:
    if not gold or gold.strip().upper() not in ANSWER_LETTERS:
        raise ValueError(f"Gold answer must be one of {ANSWER_LETTERS}, got {gold!r}")
    return pred is not None and pred.strip().upper() == gold.strip().upper()


def over_citation_rate(marks: "VerifiabilityMarks") -> Ratio:
    not_verifiable = [m for m in marks.marks if not m.verifiable]
    return _ratio(sum(1 for m in not_verifiable if m.cited), len(not_verifiable))


@dataclass(frozen=True)
class MetricBundle:
    coverage: Ratio = None
    precision: Ratio = None
    recall: Ratio = None
    f1: Ratio = None
    grounding_score: Ratio = None
    per_modality_precision: Dict[str, Ratio] = field(default_factory=dict)
    per_modality_counts: Dict[str, int] = field(default_factory=dict)
    answer_correct: Optional[bool] = None
    over_citation_rate: Ratio = None

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {name: _as_float(getattr(self, name)) for name in BUNDLE_FIELDS}
        data["per_modality_precision"] = {m: _as_float(v) for m, v in self.per_modality_precision.items()}
        data["per_modality_counts"] = dict(self.per_modality_counts)
        data["answer_correct"] = self.answer_correct
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MetricBundle":
        return cls(
            **{name: _as_fraction(data.get(name)) for name in BUNDLE_FIELDS},
            per_modality_precision={m: _as_fraction(v) for m, v in data.get("per_modality_precision", {}).items()},
            per_modality_counts=dict(data.get("per_modality_counts", {})),
            answer_correct=data.get("answer_correct"),
        )


def compute_bundle(marks: "VerifiabilityMarks", judgments: "AttributionJudgments",
                   answer_letter: Optional[str] = None, gold_answer: Optional[str] = None) -> MetricBundle:
    cov = coverage(marks)
    precision, recall, f1 = attribution_scores(judgments)
    modality_precision, modality_counts = per_modality_precision(judgments)
    return MetricBundle(
        coverage=cov,
        precision=precision,
        recall=recall,
        f1=f1,
        grounding_score=grounding_score(cov, f1),
        per_modality_precision=modality_precision,
        per_modality_counts=modality_counts,
        answer_correct=answer_accuracy(answer_letter, gold_answer) if gold_answer else None,
        over_citation_rate=over_citation_rate(marks),
    )


@dataclass(frozen=True)
class DatasetReport:
    means: Dict[str, Optional[float]]
    defined: Dict[str, int]
    per_modality_precision: Dict[str, Optional[float]]
    per_modality_counts: Dict[str, int]
    responses: int = 0
    skipped: int = 0
    undefined_coverage: int = 0
    undefined_attribution: int = 0
    accuracy: Optional[float] = None
    graded: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "means": dict(self.means),
            "defined": dict(self.defined),
            "per_modality_precision": dict(self.per_modality_precision),
            "per_modality_counts": dict(self.per_modality_counts),
            "counts": {
                "responses": self.responses,
                "skipped": self.skipped,
                "undefined_coverage": self.undefined_coverage,
                "undefined_attribution": self.undefined_attribution,
                "graded": self.graded,
            },
            "accuracy": self.accuracy,
        }


def _mean(values: Sequence[Fraction]) -> Optional[float]:
    return float(sum(values, Fraction(0)) / len(values)) if values else None


def aggregate(records: Iterable["EvalRecord"], skipped: int = 0) -> DatasetReport:
    """Macro means: each response scored first, then averaged over defined values."""
    bundles: List[MetricBundle] = [r.metrics for r in records]
    means, defined = {}, {}
    for name in BUNDLE_FIELDS:
        values = [getattr(b, name) for b in bundles if getattr(b, name) is not None]
        means[name] = _mean(values)
        defined[name] = len(values)

    modality_means, modality_counts = {}, {}
    for modality in Modality:
        key = modality.value
        values = [b.per_modality_precision[key] for b in bundles
                  if b.per_modality_precision.get(key) is not None]
        modality_means[key] = _mean(values)
        modality_counts[key] = sum(b.per_modality_counts.get(key, 0) for b in bundles)

    graded = [b.answer_correct for b in bundles if b.answer_correct is not None]
    return DatasetReport(
        means=means,
        defined=defined,
        per_modality_precision=modality_means,
        per_modality_counts=modality_counts,
        responses=len(bundles),
        skipped=skipped,
        undefined_coverage=sum(1 for b in bundles if b.coverage is None),
        undefined_attribution=sum(1 for b in bundles if b.f1 is None),
        accuracy=(sum(graded) / len(graded)) if graded else None,
        graded=len(graded),
    )

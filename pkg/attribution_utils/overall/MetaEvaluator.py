"""Evaluating the evaluator.

Component scores (verifiability, decomposition, citation propagation,
entailment) are compared with gold labels, and end-to-end scorers are
correlated with human scores. Unit ids follow one scheme everywhere:
``<qid>`` for responses, ``<qid>/s<i>`` for sentences, ``<qid>/f<i>`` for
facts and ``<qid>/f<i>/c<j>`` for the j-th citation of a fact.
"""

import logging
import math
import re
import string
from collections import Counter
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import stats
from sklearn.metrics import balanced_accuracy_score, f1_score

from ..core.Citations import AtomicFact, Sentence, contains_citation_syntax
from ..core.Errors import MetaEvalError
from .Annotations import GoldLabelSet

LOGGER = logging.getLogger(__name__)

CORRELATION_METRICS = ("coverage", "precision", "recall", "grounding_score")
SCORERS = ("ours", "holistic", "disentangled", "disentangled_sentence")
_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})
_CITATION_UNIT_RE = re.compile(r"/f\d+/c\d+$")


def sentence_unit(question_id: str, index: int) -> str:
    return f"{question_id}/s{index}"


def fact_unit(question_id: str, index: int) -> str:
    return f"{question_id}/f{index}"


def citation_unit(question_id: str, fact_index: int, citation_index: int) -> str:
    return f"{question_id}/f{fact_index}/c{citation_index}"


# --- classification ---------------------------------------------------------

def _check_pairs(preds: Sequence[Any], golds: Sequence[Any]) -> None:
    if len(preds) != len(golds):
        raise MetaEvalError(f"Length mismatch: {len(preds)} predictions vs {len(golds)} gold labels")


def balanced_accuracy(preds: Sequence[bool], golds: Sequence[bool]) -> float:
    """(TPR + TNR) / 2; both gold classes must be present."""
    _check_pairs(preds, golds)
    if len(set(bool(g) for g in golds)) < 2:
        raise MetaEvalError("Balanced accuracy needs both classes in the gold labels")
    return float(balanced_accuracy_score([bool(g) for g in golds], [bool(p) for p in preds]))


def positive_f1(preds: Sequence[bool], golds: Sequence[bool]) -> float:
    _check_pairs(preds, golds)
    return float(f1_score([bool(g) for g in golds], [bool(p) for p in preds], zero_division=0))


# --- decomposition ----------------------------------------------------------

def tokenize(text: str) -> List[str]:
    """Lowercase, punctuation replaced by spaces, whitespace split."""
    return text.lower().translate(_PUNCT_TABLE).split()


def rouge1_f1(a: str, b: str) -> float:
    tokens_a, tokens_b = Counter(tokenize(a)), Counter(tokenize(b))
    if not tokens_a and not tokens_b:
        return 1.0
    if not tokens_a or not tokens_b:
        return 0.0
    overlap = sum((tokens_a & tokens_b).values())
    if overlap == 0:
        return 0.0
    precision = overlap / sum(tokens_a.values())
    recall = overlap / sum(tokens_b.values())
    return 2 * precision * recall / (precision + recall)


def _harmonic(p: float, r: float) -> float:
    return 0.0 if p == 0 or r == 0 else 2 * p * r / (p + r)


def greedy_match_f1(gen: Sequence[str], ref: Sequence[str]) -> Tuple[float, float, float]:
    """Per-item best Rouge-1 match, averaged on each side (items may share a match)."""
    for text in list(gen) + list(ref):
        if contains_citation_syntax(text):
            raise MetaEvalError(f"Strip citations before matching facts: {text!r}")
    if not gen and not ref:
        return 1.0, 1.0, 1.0
    if not gen or not ref:
        return 0.0, 0.0, 0.0
    scores = np.array([[rouge1_f1(g, r) for r in ref] for g in gen])
    precision = float(scores.max(axis=1).mean())
    recall = float(scores.max(axis=0).mean())
    return precision, recall, _harmonic(precision, recall)


def citation_propagation_accuracy(facts: Sequence[AtomicFact], sentences: Sequence[Sentence]) -> Optional[float]:
    """Share of facts whose citation set is exactly the parent sentence's set."""
    if not facts:
        return None
    parents = {s.index: set(s.citations) for s in sentences}
    correct = 0
    for fact in facts:
        if fact.parent_index not in parents:
            raise MetaEvalError(f"Fact parent index {fact.parent_index} has no sentence")
        correct += set(fact.citations) == parents[fact.parent_index]
    return correct / len(facts)


# --- correlation ------------------------------------------------------------

@dataclass(frozen=True)
class CorrelationResult:
    pearson_r: Optional[float]
    spearman_rho: Optional[float]
    kendall_tau: Optional[float]
    n: int

    def to_dict(self) -> Dict[str, Any]:
        return {"r": self.pearson_r, "rho": self.spearman_rho, "tau": self.kendall_tau, "n": self.n}


def _coefficient(value: float) -> Optional[float]:
    if value is None or math.isnan(value):
        return None
    value = float(min(1.0, max(-1.0, value)))
    # Round-off on perfectly (anti-)monotone data must still read as +/-1.
    if abs(abs(value) - 1.0) < 1e-12:
        return math.copysign(1.0, value)
    return value


def correlate(x: Sequence[float], y: Sequence[float]) -> CorrelationResult:
    """Pearson r, Spearman rho (average ranks) and Kendall tau-b."""
    _check_pairs(x, y)
    if len(x) < 2:
        raise MetaEvalError(f"Correlation needs at least 2 pairs, got {len(x)}")
    xs, ys = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if np.ptp(xs) == 0 or np.ptp(ys) == 0:
        LOGGER.warning("Constant score vector; correlations are undefined")
        return CorrelationResult(None, None, None, len(xs))
    pearson = stats.pearsonr(xs, ys)[0]
    spearman = stats.spearmanr(xs, ys)[0]
    kendall = stats.kendalltau(xs, ys, variant="b")[0]
    return CorrelationResult(_coefficient(pearson), _coefficient(spearman), _coefficient(kendall), len(xs))


# --- alignment with gold ------------------------------------------------------

def align(predictions: Mapping[str, Any], gold: GoldLabelSet) -> List[Tuple[str, Any, Any]]:
    """(unit_id, prediction, gold) for every gold unit; gold units without a prediction are orphans."""
    orphans = [item.unit_id for item in gold.items if item.unit_id not in predictions]
    if orphans:
        raise MetaEvalError(f"{len(orphans)} gold units have no prediction", orphans)
    extra = len(set(predictions) - set(gold.ids()))
    if extra:
        LOGGER.debug("Ignoring %d predictions without a gold label", extra)
    return [(item.unit_id, predictions[item.unit_id], item.gold) for item in gold.items]


def _record_dict(record: Any) -> Dict[str, Any]:
    return record if isinstance(record, dict) else record.to_dict()


def verifiability_predictions(records: Iterable[Any]) -> Dict[str, bool]:
    preds = {}
    for record in map(_record_dict, records):
        for mark in record["marks"]:
            preds[sentence_unit(record["question_id"], mark["index"])] = bool(mark["verifiable"])
    return preds


def entailment_predictions(records: Iterable[Any]) -> Tuple[Dict[str, bool], Dict[str, bool]]:
    """Recall-side (combined sources) and precision-side (individual sources) labels."""
    recall, precision = {}, {}
    for record in map(_record_dict, records):
        qid = record["question_id"]
        for i, judgment in enumerate(record["judgments"]):
            recall[fact_unit(qid, i)] = bool(judgment["supported"])
            for j, relevant in enumerate(judgment["relevant"]):
                precision[citation_unit(qid, i, j)] = bool(relevant)
    return recall, precision


def facts_by_sentence(records: Iterable[Any]) -> Dict[str, List[str]]:
    grouped: Dict[str, List[str]] = {}
    for record in map(_record_dict, records):
        qid = record["question_id"]
        for sentence in record.get("sentences", []):
            grouped.setdefault(sentence_unit(qid, sentence["index"]), [])
        for fact in record["facts"]:
            grouped.setdefault(sentence_unit(qid, fact["parent_index"]), []).append(fact["text"])
    return grouped


class MetaEvaluator:
    """Builds the meta-evaluation reports from eval records and gold label sets."""

    def __init__(self, records: Sequence[Any]):
        self.records = [_record_dict(r) for r in records]

    def verifiability_report(self, gold: GoldLabelSet) -> Dict[str, Any]:
        rows = align(verifiability_predictions(self.records), gold)
        preds, golds = [p for _, p, _ in rows], [bool(g) for _, _, g in rows]
        return {
            "mode": "verifiability-bacc",
            "n": len(rows),
            "balanced_accuracy": balanced_accuracy(preds, golds),
            "positive_f1": positive_f1(preds, golds),
        }

    def decomposition_report(self, gold: GoldLabelSet) -> Dict[str, Any]:
        rows = align(facts_by_sentence(self.records), gold)
        if not rows:
            raise MetaEvalError("No gold decompositions to compare")
        scores = np.array([greedy_match_f1(gen, [str(g) for g in ref]) for _, gen, ref in rows])
        precision, recall, f1 = scores.mean(axis=0)
        return {"mode": "decomposition-f1", "n": len(rows), "precision": float(precision),
                "recall": float(recall), "f1": float(f1)}

    def propagation_report(self) -> Dict[str, Any]:
        facts, correct = 0, 0
        for record in self.records:
            sentences = [Sentence.from_dict(s) for s in record.get("sentences", [])]
            record_facts = [AtomicFact.from_dict(f) for f in record["facts"]]
            accuracy = citation_propagation_accuracy(record_facts, sentences)
            if accuracy is not None:
                facts += len(record_facts)
                correct += round(accuracy * len(record_facts))
        return {"mode": "propagation", "facts": facts,
                "accuracy": (correct / facts) if facts else None}

    def entailment_report(self, gold: GoldLabelSet) -> Dict[str, Any]:
        recall_preds, precision_preds = entailment_predictions(self.records)
        report: Dict[str, Any] = {"mode": "entailment"}
        for side, preds in (("recall", recall_preds), ("precision", precision_preds)):
            side_gold = gold.subset(lambda unit_id: bool(_CITATION_UNIT_RE.search(unit_id)) == (side == "precision"))
            if not side_gold.items:
                report[side] = None
                continue
            rows = align(preds, side_gold)
            p, g = [r[1] for r in rows], [bool(r[2]) for r in rows]
            report[side] = {"n": len(rows), "balanced_accuracy": balanced_accuracy(p, g),
                            "positive_f1": positive_f1(p, g)}
        return report

    def ours_scores(self) -> Dict[str, Dict[str, Optional[float]]]:
        return {r["question_id"]: {m: r["metrics"].get(m) for m in CORRELATION_METRICS} for r in self.records}


def correlation_report(scorers: Mapping[str, Mapping[str, Mapping[str, Optional[float]]]],
                       human: GoldLabelSet) -> Dict[str, Any]:
    """Rows are scorers, columns are metrics; each cell is r/rho/tau/n over units both sides define."""
    human_scores: Dict[str, Dict[str, float]] = {}
    for item in human.items:
        gold = item.gold if isinstance(item.gold, dict) else {"grounding_score": item.gold}
        human_scores[item.unit_id] = {k: float(v) for k, v in gold.items() if v is not None}

    table: Dict[str, Dict[str, Any]] = {}
    for scorer in [s for s in SCORERS if s in scorers] + sorted(set(scorers) - set(SCORERS)):
        scores = scorers[scorer]
        missing = [unit for unit in human_scores if unit not in scores]
        if missing:
            raise MetaEvalError(f"Scorer {scorer} has no score for {len(missing)} human-scored units", missing)
        row = {}
        for metric in CORRELATION_METRICS:
            pairs = [(scores[unit].get(metric), human_scores[unit].get(metric)) for unit in human_scores]
            pairs = [(x, y) for x, y in pairs if x is not None and y is not None]
            row[metric] = correlate(*zip(*pairs)).to_dict() if len(pairs) >= 2 else None
        table[scorer] = row
    return {"mode": "correlate", "units": len(human_scores), "table": table}

"""Three-stage attribution evaluation of one response.

1. every sentence is judged verifiable or not (citations make it "cited"),
2. the reasoning block is decontextualized once and every verifiable, cited
   sentence is decomposed into atomic facts that inherit its citations,
3. each fact is judged against the combination of its cited segments (recall)
   and, when supported by several citations, against each one alone (precision).

Judge failures never abort a response: they degrade to conservative
verdicts and are recorded as warnings.
"""

import contextvars
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

from ..benchmarks.Metrics import MetricBundle, compute_bundle
from .Citations import (AtomicFact, Citation, Response, Sentence, extract_citations,
                        reasoning_text, segment_sentences)
from .Errors import JudgeError, ModalityMissingError, SegmentError, UnknownQuestionError
from .JudgeGateway import JudgeConfig, JudgeGateway, parse_fact_lines
from .MediaStore import MediaStore, SegmentHandle

LOGGER = logging.getLogger(__name__)

DECOMPOSITION_VARIANTS = ("full", "no_decontext", "single_pass")
T = TypeVar("T")
R = TypeVar("R")


@dataclass(frozen=True)
class SentenceMark:
    index: int
    verifiable: bool
    cited: bool


@dataclass(frozen=True)
class VerifiabilityMarks:
    marks: Tuple[SentenceMark, ...] = ()

    def __post_init__(self):
        for expected, mark in enumerate(self.marks):
            if mark.index != expected:
                raise ValueError("marks must be indexed 0..n-1 in order")

    def verifiable_cited(self) -> List[int]:
        return [m.index for m in self.marks if m.verifiable and m.cited]

    def to_dict(self) -> List[Dict[str, Any]]:
        return [{"index": m.index, "verifiable": m.verifiable, "cited": m.cited} for m in self.marks]

    @classmethod
    def from_dict(cls, rows: Sequence[Dict[str, Any]]) -> "VerifiabilityMarks":
        return cls(tuple(SentenceMark(int(r["index"]), bool(r["verifiable"]), bool(r["cited"])) for r in rows))


@dataclass(frozen=True)
class FactJudgment:
    citations: Tuple[Citation, ...]
    supported: bool
    relevant: Tuple[bool, ...]

    def __post_init__(self):
        if len(self.relevant) != len(self.citations):
            raise ValueError("one relevant flag per citation")
        if not self.supported and any(self.relevant):
            raise ValueError("an unsupported fact cannot have relevant citations")
        if self.supported and len(self.citations) == 1 and not self.relevant[0]:
            raise ValueError("the only citation of a supported fact is relevant")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "citations": [c.to_dict() for c in self.citations],
            "supported": self.supported,
            "relevant": list(self.relevant),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FactJudgment":
        return cls(tuple(Citation.from_dict(c) for c in data["citations"]), bool(data["supported"]),
                   tuple(bool(v) for v in data["relevant"]))


@dataclass(frozen=True)
class AttributionJudgments:
    facts: Tuple[FactJudgment, ...] = ()

    def to_dict(self) -> List[Dict[str, Any]]:
        return [f.to_dict() for f in self.facts]

    @classmethod
    def from_dict(cls, rows: Sequence[Dict[str, Any]]) -> "AttributionJudgments":
        return cls(tuple(FactJudgment.from_dict(r) for r in rows))


@dataclass(frozen=True)
class EvalRecord:
    question_id: str
    marks: VerifiabilityMarks
    facts: Tuple[AtomicFact, ...]
    judgments: AttributionJudgments
    metrics: MetricBundle
    warnings: Tuple[str, ...] = ()
    sentences: Tuple[Sentence, ...] = ()
    answer_letter: Optional[str] = None
    call_counts: Dict[str, int] = field(default_factory=dict, compare=False)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "question_id": self.question_id,
            "answer_letter": self.answer_letter,
            "sentences": [s.to_dict() for s in self.sentences],
            "marks": self.marks.to_dict(),
            "facts": [f.to_dict() for f in self.facts],
            "judgments": self.judgments.to_dict(),
            "metrics": self.metrics.to_dict(),
            "warnings": list(self.warnings),
            "call_counts": dict(sorted(self.call_counts.items())),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EvalRecord":
        return cls(
            question_id=str(data["question_id"]),
            marks=VerifiabilityMarks.from_dict(data.get("marks", [])),
            facts=tuple(AtomicFact.from_dict(f) for f in data.get("facts", [])),
            judgments=AttributionJudgments.from_dict(data.get("judgments", [])),
            metrics=MetricBundle.from_dict(data.get("metrics", {})),
            warnings=tuple(data.get("warnings", [])),
            sentences=tuple(Sentence.from_dict(s) for s in data.get("sentences", [])),
            answer_letter=data.get("answer_letter"),
            call_counts=dict(data.get("call_counts", {})),
        )


def recompute_metrics(record: EvalRecord, gold_answer: Optional[str] = None) -> MetricBundle:
    return compute_bundle(record.marks, record.judgments, record.answer_letter, gold_answer)


_SINGLE_PASS_TAG_RE = re.compile(r"^\[S(\d+)\]\s*(.*)$")


class EvalPipeline:
    """Runs the three stages for one response at a time.

    ``judges`` maps slot names (``verifiability``, ``decomposition``,
    ``entailment``) to JudgeConfigs. ``width`` bounds the per-response fan-out
    of judge calls; results are always collected in index order.
    """

    def __init__(self, gateway: JudgeGateway, media: MediaStore, judges: Dict[str, JudgeConfig],
                 width: int = 1, atomic_verifiability: bool = False,
                 decomposition_variant: str = "full"):
        if decomposition_variant not in DECOMPOSITION_VARIANTS:
            raise ValueError(f"Unknown decomposition variant: {decomposition_variant}")
        self.gateway = gateway
        self.media = media
        self.judges = judges
        self.width = max(1, width)
        self.atomic_verifiability = atomic_verifiability
        self.decomposition_variant = decomposition_variant

    def _map(self, fn: Callable[[T], R], items: Sequence[T]) -> List[R]:
        if self.width == 1 or len(items) < 2:
            return [fn(item) for item in items]
        # Each item runs in its own copy of the caller's context so the
        # per-response call tally follows it into the worker thread.
        contexts = [contextvars.copy_context() for _ in items]
        with ThreadPoolExecutor(max_workers=min(self.width, len(items))) as pool:
            return list(pool.map(lambda ctx, item: ctx.run(fn, item), contexts, items))

    @staticmethod
    def _warn(warnings: List[str], message: str) -> None:
        LOGGER.warning(message)
        warnings.append(message)

    # -- subtask 1 ---------------------------------------------------------

    def identify_verifiable(self, r: Response, warnings: Optional[List[str]] = None) -> VerifiabilityMarks:
        warnings = warnings if warnings is not None else []
        cfg = self.judges["verifiability"]

        def judge(s: Sentence) -> Tuple[bool, List[str]]:
            notes: List[str] = []
            try:
                if self.atomic_verifiability:
                    facts = self.gateway.decompose_sentence(s, self.judges["decomposition"], notes)
                    return any([self.gateway.judge_claim_verifiable(f.text, cfg).label for f in facts]), notes
                return self.gateway.judge_verifiable(s, cfg).label, notes
            except (JudgeError, ValueError) as e:
                notes.append(f"{r.question_id} sentence {s.index}: verifiability judge failed ({e}); "
                             "marked not verifiable")
                return False, notes

        results = self._map(judge, list(r.sentences))
        for _, notes in results:
            for note in notes:
                self._warn(warnings, note)
        return VerifiabilityMarks(tuple(SentenceMark(s.index, verifiable, s.cited)
                                        for s, (verifiable, _) in zip(r.sentences, results)))

    # -- subtask 2 ---------------------------------------------------------

    def decompose_response(self, r: Response, marks: VerifiabilityMarks,
                           warnings: Optional[List[str]] = None) -> List[AtomicFact]:
        warnings = warnings if warnings is not None else []
        targets = [r.sentences[i] for i in marks.verifiable_cited()]
        if not targets:
            return []
        cfg = self.judges["decomposition"]
        if self.decomposition_variant == "single_pass":
            return self._decompose_single_pass(r, targets, cfg, warnings)

        rewritten: Dict[int, str] = {}
        if self.decomposition_variant == "full":
            rewritten = self._decontextualized_texts(r, cfg, warnings)

        def decompose(s: Sentence) -> Tuple[List[AtomicFact], List[str]]:
            notes: List[str] = []
            try:
                return self.gateway.decompose_sentence(s, cfg, notes, text=rewritten.get(s.index)), notes
            except JudgeError as e:
                notes.append(f"{r.question_id} sentence {s.index}: decomposition failed ({e}); "
                             "using the sentence as one fact")
                return [AtomicFact(s.text, s.index, s.citations)], notes

        facts: List[AtomicFact] = []
        for sentence_facts, notes in self._map(decompose, targets):
            for note in notes:
                self._warn(warnings, note)
            facts.extend(sentence_facts)
        return facts

    def _decontextualized_texts(self, r: Response, cfg: JudgeConfig, warnings: List[str]) -> Dict[int, str]:
        original = reasoning_text(r.sentences)
        try:
            rewritten = self.gateway.decontextualize(original, cfg, warnings)
        except JudgeError as e:
            self._warn(warnings, f"{r.question_id}: decontextualization failed ({e}); using original sentences")
            return {}
        if rewritten == original:
            return {}
        resegmented = segment_sentences(rewritten)
        if len(resegmented) != len(r.sentences):
            self._warn(warnings, f"{r.question_id}: decontextualized text has {len(resegmented)} sentences, "
                                 f"expected {len(r.sentences)}; using original sentences")
            return {}
        mismatched = [s.index for s, new in zip(r.sentences, resegmented) if set(s.citations) != set(new.citations)]
        if mismatched:
            self._warn(warnings, f"{r.question_id}: decontextualization moved citations in sentences "
                                 f"{mismatched}; using original sentences")
            return {}
        return {s.index: new.raw_text for s, new in zip(r.sentences, resegmented)}

    def _decompose_single_pass(self, r: Response, targets: Sequence[Sentence], cfg: JudgeConfig,
                               warnings: List[str]) -> List[AtomicFact]:
        numbered = "\n".join(f"[S{s.index + 1}] {s.raw_text}" for s in r.sentences)
        prompt = self.gateway.render("decompose_response", response=numbered)
        try:
            lines = parse_fact_lines(self.gateway.complete("decompose", prompt, cfg, source_text=numbered))
        except JudgeError as e:
            self._warn(warnings, f"{r.question_id}: response-level decomposition failed ({e})")
            lines = []
        wanted = {s.index: s for s in targets}
        grouped: Dict[int, List[AtomicFact]] = {i: [] for i in wanted}
        for line in lines:
            match = _SINGLE_PASS_TAG_RE.match(line)
            if not match or int(match.group(1)) - 1 not in wanted:
                continue
            parent = wanted[int(match.group(1)) - 1]
            text, citations = extract_citations(match.group(2), warnings)
            if not text:
                continue
            kept = tuple(c for c in citations if c in parent.citations)
            grouped[parent.index].append(AtomicFact(text, parent.index, kept or parent.citations))
        facts: List[AtomicFact] = []
        for s in targets:
            if not grouped[s.index]:
                self._warn(warnings, f"{r.question_id} sentence {s.index}: no facts in response-level "
                                     "decomposition, using the sentence as one fact")
                grouped[s.index] = [AtomicFact(s.text, s.index, s.citations)]
            facts.extend(grouped[s.index])
        return facts

    # -- subtask 3 ---------------------------------------------------------

    def _segments(self, question_id: str, fact: AtomicFact, notes: List[str]
                  ) -> List[Optional[SegmentHandle]]:
        segments: List[Optional[SegmentHandle]] = []
        for c in fact.citations:
            try:
                segments.append(self.media.resolve_segment(question_id, c, notes))
            except ModalityMissingError as e:
                notes.append(f"{e}; citation {c} scored not relevant")
                segments.append(None)
            except SegmentError as e:
                notes.append(f"{question_id}: could not extract {c} ({e}); citation scored not relevant")
                segments.append(None)
        return segments

    def _judge_fact(self, question_id: str, fact: AtomicFact) -> Tuple[FactJudgment, List[str]]:
        cfg = self.judges["entailment"]
        notes: List[str] = []
        unsupported = FactJudgment(fact.citations, False, tuple(False for _ in fact.citations))
        segments = self._segments(question_id, fact, notes)
        available = [(i, s) for i, s in enumerate(segments) if s is not None]
        if not available:
            return unsupported, notes
        try:
            supported = self.gateway.judge_entailment(fact, [s for _, s in available], cfg).label
        except (JudgeError, ValueError) as e:
            notes.append(f"{question_id}: entailment judge failed for '{fact.text}' ({e}); marked not supported")
            return unsupported, notes
        if not supported:
            return unsupported, notes

        relevant = [False] * len(fact.citations)
        if len(fact.citations) == 1:
            relevant[0] = True
        else:
            for i, segment in available:
                try:
                    relevant[i] = self.gateway.judge_entailment(fact, [segment], cfg).label
                except (JudgeError, ValueError) as e:
                    notes.append(f"{question_id}: precision judge failed for {fact.citations[i]} ({e}); "
                                 "marked not relevant")
        return FactJudgment(fact.citations, True, tuple(relevant)), notes

    def assess_attribution(self, question_id: str, facts: Sequence[AtomicFact],
                           warnings: Optional[List[str]] = None) -> AttributionJudgments:
        warnings = warnings if warnings is not None else []
        for fact in facts:
            if not fact.citations:
                raise ValueError(f"Fact without citations cannot be assessed: {fact.text!r}")
        results = self._map(lambda fact: self._judge_fact(question_id, fact), list(facts))
        for _, notes in results:
            for note in notes:
                self._warn(warnings, note)
        return AttributionJudgments(tuple(judgment for judgment, _ in results))

    # -- whole response ----------------------------------------------------

    def evaluate_response(self, r: Response, gold_answer: Optional[str] = None) -> EvalRecord:
        if r.question_id not in self.media.manifest:
            raise UnknownQuestionError(r.question_id)
        warnings: List[str] = list(r.warnings)
        with self.gateway.tally() as calls:
            marks = self.identify_verifiable(r, warnings)
            facts = self.decompose_response(r, marks, warnings)
            judgments = self.assess_attribution(r.question_id, facts, warnings)
        return EvalRecord(
            question_id=r.question_id,
            marks=marks,
            facts=tuple(facts),
            judgments=judgments,
            metrics=compute_bundle(marks, judgments, r.answer_letter, gold_answer),
            warnings=tuple(warnings),
            sentences=r.sentences,
            answer_letter=r.answer_letter,
            call_counts=dict(calls),
        )

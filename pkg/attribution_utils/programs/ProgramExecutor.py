"""Plan-then-execute runner for grounding programs.

A program is planned once by the generation slot, then executed step by step:
find steps call the retrieval backend, describe steps look at extracted
segments, and the terminal synthesize step answers from the descriptions
alone. The synthesizer tags its sentences with evidence labels (``[E2]``) and
the executor turns those tags back into citations, so every citation in the
final response is a segment some describe step actually looked at.
"""

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

from tqdm import tqdm

from ..benchmarks.GenerationRunner import EvalTask
from ..core.Citations import (AtomicFact, Citation, Modality, Response, TimeSpan, dedupe_citations,
                              format_citation, format_citation_group, parse_answer_letter, parse_response,
                              segment_sentences, split_reasoning_and_answer)
from ..core.Errors import AttributionError, BackendError, ModalityMissingError, ProgramParseError
from ..core.JudgeGateway import JudgeConfig, JudgeGateway
from ..core.MediaStore import MediaStore
from .ProgramParser import GroundingProgram, Step, parse_program
from .Retrieval import RetrievalBackend

LOGGER = logging.getLogger(__name__)

DEFAULT_DESCRIBE_INSTRUCTION = "Describe what happens in these segments."
DEFAULT_SYNTHESIZE_INSTRUCTION = "Answer the question from the evidence."
STRICT_SUFFIX = ("Only state what is directly visible or audible in the attached segments. "
                 "Leave out anything you cannot observe there.")
INSUFFICIENT_EVIDENCE = "There is insufficient evidence to answer the question."
PLAN_REPAIR = "Your previous program could not be used: {error}\nReturn a corrected program in the same format."

_TAG_RE = re.compile(r"\[\s*(E\d+(?:\s*[,;]\s*E\d+)*)\s*\]")
_SPACE_BEFORE_PUNCT_RE = re.compile(r"\s+([.,;:!?])")
_TERMINAL_RE = re.compile(r"^(.*?)([.!?]+[\"'”’]*)$", re.DOTALL)


@dataclass(frozen=True)
class Refinement:
    checked: bool = False
    passed: bool = False
    retried: bool = False

    @property
    def unverified(self) -> bool:
        return self.checked and not self.passed

    def to_dict(self) -> Dict[str, bool]:
        return {"checked": self.checked, "passed": self.passed, "retried": self.retried,
                "unverified": self.unverified}


@dataclass(frozen=True)
class Evidence:
    label: str
    text: str
    citations: Tuple[Citation, ...]
    step: Optional[int] = None


@dataclass(frozen=True)
class TraceStep:
    step: int
    op: str
    binding: Optional[str] = None
    inputs: Dict[str, Any] = field(default_factory=dict)
    output: str = ""
    segments_used: Tuple[Citation, ...] = ()
    segments_available: Tuple[Citation, ...] = ()
    refinement: Refinement = Refinement()
    item: Optional[int] = None
    evidence_label: Optional[str] = None
    error: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "step": self.step,
            "item": self.item,
            "op": self.op,
            "binding": self.binding,
            "inputs": self.inputs,
            "output": self.output,
            "segments_used": [format_citation(c) for c in self.segments_used],
            "segments_available": [format_citation(c) for c in self.segments_available],
            "refinement": self.refinement.to_dict(),
            "evidence_label": self.evidence_label,
            "error": self.error,
        }


@dataclass
class Trace:
    question_id: str
    program: GroundingProgram
    steps: List[TraceStep] = field(default_factory=list)
    retrieval_calls: int = 0
    warnings: List[str] = field(default_factory=list)
    response: Optional[Response] = None

    def segments_used(self) -> set:
        return {c for s in self.steps if s.op == "describe" for c in s.segments_used}

    @property
    def terminal_error(self) -> Optional[str]:
        terminal = [s for s in self.steps if s.op == "synthesize"]
        return terminal[-1].error if terminal else "terminal step never ran"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "question_id": self.question_id,
            "paradigm": self.program.paradigm,
            "grounding": self.program.grounding,
            "program": self.program.to_dict(),
            "steps": [s.to_dict() for s in self.steps],
            "retrieval_calls": self.retrieval_calls,
            "response": {"raw": self.response.raw, "answer_letter": self.response.answer_letter}
            if self.response is not None else None,
            "warnings": list(self.warnings),
        }


@dataclass(frozen=True)
class ProgramResult:
    question_id: str
    variant: str
    trace: Optional[Trace] = None
    response: Optional[Response] = None
    error: Optional[str] = None
    backend_failure: bool = False
    model_name: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_line(self) -> Dict[str, Any]:
        if self.ok:
            return {"question_id": self.question_id, "variant": self.variant, "raw": self.response.raw,
                    "model_name": self.model_name, "effort_level": None}
        return {"question_id": self.question_id, "variant": self.variant, "error": self.error}


def _note(warnings: Optional[List[str]], message: str) -> None:
    LOGGER.warning(message)
    if warnings is not None:
        warnings.append(message)


def _with_citations(text: str, citations: Sequence[Citation]) -> str:
    """Insert a citation group before the sentence's closing punctuation."""
    match = _TERMINAL_RE.match(text)
    body, terminal = (match.group(1).rstrip(), match.group(2)) if match else (text.rstrip(), ".")
    if not citations:
        return f"{body}{terminal}"
    return f"{body} {format_citation_group(citations)}{terminal}"


def degenerate_response(question_id: str, warnings: Optional[List[str]] = None) -> Response:
    _note(warnings, f"{question_id}: no usable evidence, answering with insufficient evidence")
    return parse_response(f"Reasoning: {INSUFFICIENT_EVIDENCE}\nAnswer: ", question_id)


class ProgramExecutor:
    """Runs grounding programs against one media store.

    ``judges`` needs the ``generation`` slot (planning, describing and
    synthesizing), ``entailment`` (refinement checks) and ``verifiability``
    (deciding whether an untagged sentence inherits citations).
    """

    def __init__(self, gateway: JudgeGateway, media: MediaStore, retriever: RetrievalBackend,
                 judges: Mapping[str, JudgeConfig], retrieval_settings: Optional[Mapping[str, Any]] = None,
                 refinement: bool = True, refine_synthesize: bool = False,
                 tag_untagged_with_judge: bool = True, width: int = 1, show_progress: bool = False):
        self.gateway = gateway
        self.media = media
        self.retriever = retriever
        self.judges = dict(judges)
        settings = dict(retrieval_settings or {})
        self.default_find_modality = Modality.parse(settings.get("default_find_modality", "visual"))
        self.default_query_modalities = tuple(
            Modality.parse(m) for m in settings.get("default_query_modalities", ("visual", "audio")))
        self.refinement = refinement
        self.refine_synthesize = refine_synthesize
        self.tag_untagged_with_judge = tag_untagged_with_judge
        self.width = max(1, width)
        self.show_progress = show_progress

    @property
    def generation(self) -> JudgeConfig:
        return self.judges["generation"]

    # -- planning ----------------------------------------------------------

    def plan(self, task: EvalTask, paradigm: str, grounding: str) -> GroundingProgram:
        """One planning call; a plan that does not parse gets one repair attempt."""
        entry = self.media.manifest.entry(task.question_id)
        prompt = self.gateway.render(f"plan_{paradigm}_{grounding}", question=task.question,
                                     options=task.options_block(), duration_s=entry.duration_s)
        attachments = self.media.source_attachments(task.question_id)
        raw = self.gateway.complete("plan", prompt, self.generation, attachments)
        try:
            return parse_program(raw, paradigm, grounding)
        except ProgramParseError as e:
            LOGGER.info("%s: plan did not parse (%s), asking for a repair", task.question_id, e)
            repair = f"{prompt}\n{raw}\n\n{PLAN_REPAIR.format(error=e)}"
        raw = self.gateway.complete("plan", repair, self.generation, attachments)
        return parse_program(raw, paradigm, grounding)

    # -- atomic operations -------------------------------------------------

    def find_event(self, query: str, modality: Modality, question_id: str,
                   warnings: Optional[List[str]] = None) -> List[TimeSpan]:
        return self.retriever.find(question_id, query, modality, warnings)

    def _describe_call(self, handles: Sequence, instruction: str) -> str:
        attachments = [h.as_attachment() for h in handles]
        listing = "\n".join(f"Segment {i}: {a.label}" for i, a in enumerate(attachments, start=1))
        prompt = self.gateway.render("describe", segments=listing,
                                     instruction=instruction or DEFAULT_DESCRIBE_INSTRUCTION)
        return self.gateway.complete("describe", prompt, self.generation, attachments).strip()

    def describe(self, question_id: str, citations: Sequence[Citation], instruction: str,
                 warnings: Optional[List[str]] = None) -> Tuple[str, Tuple[Citation, ...]]:
        """Description of the cited segments plus the citations it consumed."""
        if not citations:
            _note(warnings, f"{question_id}: describe got no segments, returning an empty description")
            return "", ()
        handles = [self.media.resolve_segment(question_id, c, warnings) for c in dedupe_citations(citations)]
        return self._describe_call(handles, instruction), tuple(h.citation for h in handles)

    def _entailed(self, text: str, citations: Sequence[Citation], handles: Sequence) -> bool:
        fact = AtomicFact(text, 0, tuple(citations))
        return self.gateway.judge_entailment(fact, handles, self.judges["entailment"], task="refine").label

    def refine_step(self, question_id: str, text: str, citations: Sequence[Citation], instruction: str,
                    warnings: Optional[List[str]] = None) -> Tuple[str, Refinement]:
        """Check a description against its segments; one stricter retry, then keep it unverified."""
        if not text.strip() or not citations:
            return text, Refinement()
        try:
            handles = [self.media.resolve_segment(question_id, c) for c in citations]
            if self._entailed(text, citations, handles):
                return text, Refinement(checked=True, passed=True)
            retried = self._describe_call(handles, f"{instruction or DEFAULT_DESCRIBE_INSTRUCTION} {STRICT_SUFFIX}")
            if self._entailed(retried, citations, handles):
                return retried, Refinement(checked=True, passed=True, retried=True)
        except AttributionError as e:
            _note(warnings, f"{question_id}: refinement check failed ({e}); description left unchecked")
            return text, Refinement()
        _note(warnings, f"{question_id}: description of {format_citation_group(citations)} "
                        "is not supported by its segments after a retry; kept unverified")
        return retried, Refinement(checked=True, passed=False, retried=True)

    def synthesize(self, question_id: str, evidence: Sequence[Union[Evidence, Tuple[str, Sequence[Citation]]]],
                   instruction: str, task: EvalTask, warnings: Optional[List[str]] = None) -> Response:
        """Text-only answer from the evidence; never sends media."""
        items = [e if isinstance(e, Evidence) else Evidence(f"E{i}", e[0], tuple(e[1]))
                 for i, e in enumerate(evidence, start=1)]
        usable = [e for e in items if e.text.strip()]
        if not usable:
            return degenerate_response(question_id, warnings)
        block = "\n".join(f"[{e.label}] {e.text}" for e in usable)
        prompt = self.gateway.render("synthesize", evidence=block,
                                     instruction=instruction or DEFAULT_SYNTHESIZE_INSTRUCTION,
                                     question=task.question, options=task.options_block())
        raw = self.gateway.complete("synthesize", prompt, self.generation, media=())
        return self.assemble(raw, usable, question_id, warnings)

    # -- citation assembly -------------------------------------------------

    def _verifiable(self, text: str, warnings: Optional[List[str]]) -> bool:
        try:
            return self.gateway.judge_claim_verifiable(text, self.judges["verifiability"]).label
        except AttributionError as e:
            _note(warnings, f"Verifiability check for an untagged sentence failed ({e}); left uncited")
            return False

    def assemble(self, raw: str, evidence: Sequence[Evidence], question_id: str,
                 warnings: Optional[List[str]] = None) -> Response:
        """Map evidence tags to citations and rebuild the response around them.

        Citations the synthesizer wrote itself are dropped; tagged sentences
        carry the union of their evidence citations; untagged sentences the
        verifiability judge accepts carry the union of all evidence citations.
        """
        notes: List[str] = []
        reasoning, answer_text = split_reasoning_and_answer(raw or "")
        if answer_text is None:
            _note(notes, f"{question_id}: synthesizer output has no answer marker")
        by_label = {e.label: e for e in evidence}
        every_citation = dedupe_citations(tuple(c for e in evidence for c in e.citations))

        pieces: List[Tuple[str, List[str]]] = []
        for s in segment_sentences(reasoning, notes):
            if s.citations:
                _note(notes, f"{question_id}: dropped citations written by the synthesizer in sentence {s.index}")
            tags = [label.strip() for group in _TAG_RE.findall(s.raw_text) for label in re.split(r"[,;]", group)]
            text = _SPACE_BEFORE_PUNCT_RE.sub(r"\1", re.sub(r"\s+", " ", _TAG_RE.sub("", s.text))).strip()
            if not text:
                if pieces:
                    pieces[-1][1].extend(tags)
                continue
            pieces.append((text, tags))

        sentences = []
        for text, tags in pieces:
            unknown = [t for t in tags if t not in by_label]
            if unknown:
                _note(notes, f"{question_id}: unknown evidence tags {unknown} ignored")
            known = [t for t in dict.fromkeys(tags) if t in by_label]
            if known:
                citations = dedupe_citations(tuple(c for t in known for c in by_label[t].citations))
            elif self.tag_untagged_with_judge and self._verifiable(text, notes):
                citations = every_citation
            else:
                citations = ()
            sentences.append(_with_citations(text, citations))

        letter = parse_answer_letter(answer_text)
        assembled = parse_response(f"Reasoning: {' '.join(sentences)}\nAnswer: {letter or ''}", question_id)
        if warnings is not None:
            warnings.extend(notes)
        return replace(assembled, warnings=assembled.warnings + tuple(notes))

    # -- execution ---------------------------------------------------------

    def _query_modalities(self, question_id: str, step: Step) -> List[Modality]:
        if step.modality is not None:
            return [step.modality]
        entry = self.media.manifest.entry(question_id)
        present = [m for m in self.default_query_modalities if entry.track(m) is not None]
        if not present:
            raise ModalityMissingError(question_id, "/".join(m.value for m in self.default_query_modalities))
        return present

    def _describe_job(self, index: int, step: Step, question_id: str, citations: Tuple[Citation, ...],
                      item: Optional[int]) -> Tuple[TraceStep, List[str]]:
        notes: List[str] = []
        inputs = {"instruction": step.instruction, "segments": [format_citation(c) for c in citations]}
        try:
            text, used = self.describe(question_id, citations, step.instruction, notes)
            refinement = Refinement()
            if self.refinement and text.strip():
                text, refinement = self.refine_step(question_id, text, used, step.instruction, notes)
        except AttributionError as e:
            notes.append(f"{question_id}: step {index} describe failed: {e}")
            LOGGER.warning(notes[-1])
            return TraceStep(index, "describe", step.binding, inputs, segments_available=citations, item=item,
                             error=f"{type(e).__name__}: {e}"), notes
        return TraceStep(index, "describe", step.binding, inputs, text, used, citations, refinement,
                         item=item), notes

    def _describe_jobs(self, step: Step, question_id: str,
                       found: Mapping[str, List[Citation]]) -> List[Tuple[Tuple[Citation, ...], Optional[int]]]:
        if step.spans:
            modalities = self._query_modalities(question_id, step)
            return [(tuple(Citation(m, span) for span in step.spans for m in modalities), None)]
        hits = found.get(step.source, [])
        if step.modality is not None:
            hits = [Citation(step.modality, h.span) for h in hits]
        if step.per_item:
            return [((hit,), i) for i, hit in enumerate(hits)] or [((), 0)]
        return [(tuple(hits), None)]

    def execute(self, program: GroundingProgram, task: EvalTask) -> Tuple[Trace, Response]:
        """Run every step in order; step failures are recorded and the terminal step always runs."""
        question_id = task.question_id
        self.media.manifest.entry(question_id)
        trace = Trace(question_id, program)
        found: Dict[str, List[Citation]] = {}
        described: Dict[str, List[Evidence]] = {}
        evidence: List[Evidence] = []
        response: Optional[Response] = None

        for index, step in enumerate(program.steps):
            if step.op == "find_event":
                modality = step.modality or self.default_find_modality
                inputs = {"query": step.query, "modality": modality.value}
                trace.retrieval_calls += 1
                try:
                    hits = [Citation(modality, span)
                            for span in self.find_event(step.query, modality, question_id, trace.warnings)]
                    trace.steps.append(TraceStep(index, "find_event", step.binding, inputs,
                                                 ", ".join(format_citation(c) for c in hits)))
                except AttributionError as e:
                    hits = []
                    _note(trace.warnings, f"{question_id}: step {index} find_event failed: {e}")
                    trace.steps.append(TraceStep(index, "find_event", step.binding, inputs,
                                                 error=f"{type(e).__name__}: {e}"))
                if step.binding:
                    found[step.binding] = hits

            elif step.op == "describe":
                try:
                    jobs = self._describe_jobs(step, question_id, found)
                except AttributionError as e:
                    _note(trace.warnings, f"{question_id}: step {index} describe failed: {e}")
                    trace.steps.append(TraceStep(index, "describe", step.binding, {"instruction": step.instruction},
                                                 error=f"{type(e).__name__}: {e}"))
                    continue
                with ThreadPoolExecutor(max_workers=self.width) as pool:
                    done = list(pool.map(lambda job: self._describe_job(index, step, question_id, *job), jobs))
                for trace_step, notes in done:
                    trace.warnings.extend(notes)
                    if trace_step.error is None and trace_step.output.strip():
                        item = Evidence(f"E{len(evidence) + 1}", trace_step.output, trace_step.segments_used, index)
                        evidence.append(item)
                        trace_step = replace(trace_step, evidence_label=item.label)
                        if step.binding:
                            described.setdefault(step.binding, []).append(item)
                    trace.steps.append(trace_step)

            else:
                selected = ([e for ref in step.evidence for e in described.get(ref, [])]
                            if step.evidence else list(evidence))
                inputs = {"instruction": step.instruction,
                          "evidence": {e.label: [format_citation(c) for c in e.citations] for e in selected}}
                available = dedupe_citations(tuple(c for e in selected for c in e.citations))
                try:
                    response = self.synthesize(question_id, selected, step.instruction, task, trace.warnings)
                    used = dedupe_citations(tuple(c for s in response.sentences for c in s.citations))
                    refinement = self._refine_synthesis(question_id, response, trace.warnings) \
                        if self.refine_synthesize else Refinement()
                    trace.steps.append(TraceStep(index, "synthesize", None, inputs, response.raw, used, available,
                                                 refinement))
                except AttributionError as e:
                    _note(trace.warnings, f"{question_id}: synthesize failed: {e}")
                    trace.steps.append(TraceStep(index, "synthesize", None, inputs, segments_available=available,
                                                 error=f"{type(e).__name__}: {e}"))
                    response = degenerate_response(question_id)

        trace.response = response
        return trace, response

    def _refine_synthesis(self, question_id: str, response: Response, warnings: List[str]) -> Refinement:
        """Check each cited sentence of the answer against its own citations."""
        cited = [s for s in response.sentences if s.citations]
        if not cited:
            return Refinement()
        passed = True
        for s in cited:
            try:
                handles = [self.media.resolve_segment(question_id, c) for c in s.citations]
                ok = self._entailed(s.text, s.citations, handles)
            except AttributionError as e:
                _note(warnings, f"{question_id}: could not check answer sentence {s.index} ({e})")
                return Refinement()
            if not ok:
                passed = False
                _note(warnings, f"{question_id}: answer sentence {s.index} is not supported by its citations")
        return Refinement(checked=True, passed=passed)

    # -- batch ---------------------------------------------------------------

    def run_task(self, task: EvalTask, paradigm: str, grounding: str) -> ProgramResult:
        variant = f"{paradigm}_{grounding}"
        try:
            program = self.plan(task, paradigm, grounding)
            trace, response = self.execute(program, task)
        except (AttributionError, ValueError) as e:
            LOGGER.warning("%s: program run failed: %s", task.question_id, e)
            return ProgramResult(task.question_id, variant, error=f"{type(e).__name__}: {e}",
                                 backend_failure=isinstance(e, BackendError))
        if trace.terminal_error:
            return ProgramResult(task.question_id, variant, trace, response, error=trace.terminal_error,
                                 backend_failure=trace.terminal_error.startswith("BackendError"))
        return ProgramResult(task.question_id, variant, trace, response, model_name=self.generation.model_name)

    def run_all(self, tasks: Sequence[EvalTask], paradigm: str, grounding: str) -> List[ProgramResult]:
        LOGGER.info("Running %s/%s programs over %d tasks", paradigm, grounding, len(tasks))
        with ThreadPoolExecutor(max_workers=self.width) as pool:
            futures = pool.map(lambda task: self.run_task(task, paradigm, grounding), tasks)
            return list(tqdm(futures, total=len(tasks), desc=f"programs[{paradigm}/{grounding}]",
                             disable=not self.show_progress))

"""Candidate response generation: Base, +Citation and Post-hoc variants."""

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

from tqdm import tqdm

from ..core.Citations import Response, parse_response
from ..core.Errors import AttributionError, BackendError, ConfigError, JudgeError
from ..core.JudgeGateway import JudgeConfig, JudgeGateway
from ..core.MediaStore import MediaStore

LOGGER = logging.getLogger(__name__)

OPTION_LETTERS = "ABCDE"
_OPTION_PREFIX_RE = re.compile(r"^\s*\(?([A-E])[.):]\s+")


class GenerationVariant(str, Enum):
    BASE = "base"
    CITATION = "citation"
    POSTHOC = "posthoc"

    @classmethod
    def parse(cls, value: str) -> "GenerationVariant":
        try:
            return cls(value.strip().lower())
        except ValueError:
            raise ConfigError(f"Unknown generation variant: {value!r} (expected base, citation or posthoc)")


@dataclass(frozen=True)
class EvalTask:
    question_id: str
    question: str
    options: Tuple[Tuple[str, str], ...]
    gold_answer: Optional[str] = None

    def __post_init__(self):
        letters = "".join(letter for letter, _ in self.options)
        if not 2 <= len(self.options) <= 5 or letters != OPTION_LETTERS[:len(self.options)]:
            raise ValueError(f"{self.question_id}: options must be 2-5 choices lettered from A, got {letters!r}")
        if self.gold_answer is not None and self.gold_answer not in letters:
            raise ValueError(f"{self.question_id}: gold answer {self.gold_answer!r} is not an option letter")

    @classmethod
    def build(cls, question_id: str, question: str, options: Union[Sequence[str], Mapping[str, str]],
              gold_answer: Optional[str] = None) -> "EvalTask":
        """Options may be a letter->text mapping or a list (optionally "A. ..." prefixed)."""
        if isinstance(options, Mapping):
            pairs = tuple((str(k).strip().upper(), str(v).strip()) for k, v in options.items())
        else:
            pairs = []
            for letter, text in zip(OPTION_LETTERS, options):
                prefix = _OPTION_PREFIX_RE.match(text)
                if prefix and prefix.group(1) == letter:
                    text = text[prefix.end():]
                pairs.append((letter, text.strip()))
            if len(options) > len(OPTION_LETTERS):
                pairs.append(("?", ""))
            pairs = tuple(pairs)
        gold = gold_answer.strip().upper() if gold_answer else None
        return cls(str(question_id), question, pairs, gold)

    def options_block(self) -> str:
        return "\n".join(f"{letter}. {text}" for letter, text in self.options)


@dataclass(frozen=True)
class GenerationResult:
    question_id: str
    variant: str
    raw: Optional[str] = None
    model_name: Optional[str] = None
    effort_level: Optional[str] = None
    error: Optional[str] = None
    warnings: Tuple[str, ...] = ()
    backend_failure: bool = field(default=False, compare=False)

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_line(self) -> Dict[str, Any]:
        if self.ok:
            return {"question_id": self.question_id, "variant": self.variant, "raw": self.raw,
                    "model_name": self.model_name, "effort_level": self.effort_level}
        return {"question_id": self.question_id, "variant": self.variant, "error": self.error}


@dataclass
class GenerationRun:
    results: List[GenerationResult]

    @property
    def responses(self) -> List[GenerationResult]:
        return [r for r in self.results if r.ok]

    @property
    def failures(self) -> List[GenerationResult]:
        return [r for r in self.results if not r.ok]

    @property
    def outage(self) -> bool:
        """Every task failed at the transport layer."""
        return bool(self.results) and all(r.backend_failure for r in self.results)


def _narrative(r: Response) -> str:
    return re.sub(r"\s+", " ", " ".join(s.text for s in r.sentences)).strip()


class GenerationRunner:
    """Calls the generation slot with full-source media attached."""

    def __init__(self, gateway: JudgeGateway, media: MediaStore, width: int = 1,
                 posthoc_source: str = "base", show_progress: bool = False):
        self.gateway = gateway
        self.media = media
        self.width = max(1, width)
        self.posthoc_source = GenerationVariant.parse(posthoc_source)
        if self.posthoc_source is GenerationVariant.POSTHOC:
            raise ConfigError("posthoc_source must be base or citation")
        self.show_progress = show_progress

    def _generate(self, template: str, task: EvalTask, cfg: JudgeConfig) -> Response:
        prompt = self.gateway.render(template, question=task.question, options=task.options_block())
        raw = self.gateway.complete("generate", prompt, cfg, self.media.source_attachments(task.question_id))
        return parse_response(raw, task.question_id)

    def generate_base(self, task: EvalTask, cfg: JudgeConfig) -> Response:
        return self._generate("generate_base", task, cfg)

    def generate_with_citations(self, task: EvalTask, cfg: JudgeConfig) -> Response:
        return self._generate("generate_citation", task, cfg)

    def posthoc_attribute(self, r: Response, task: EvalTask, cfg: JudgeConfig) -> Response:
        """Citation-only repair; anything that touches the narrative or the answer is rejected."""
        prompt = self.gateway.render("posthoc", Output=r.raw)
        try:
            raw = self.gateway.complete("posthoc", prompt, cfg, self.media.source_attachments(task.question_id),
                                        source_text=r.raw)
        except JudgeError as e:
            return self._keep(r, f"{r.question_id}: post-hoc repair failed ({e}); keeping the original")
        repaired = parse_response(raw, r.question_id)
        if repaired.answer_letter != r.answer_letter:
            return self._keep(r, f"{r.question_id}: post-hoc repair changed the answer "
                                 f"{r.answer_letter} -> {repaired.answer_letter}; keeping the original")
        if _narrative(repaired) != _narrative(r):
            return self._keep(r, f"{r.question_id}: post-hoc repair altered the narrative text; "
                                 "keeping the original")
        return repaired

    @staticmethod
    def _keep(r: Response, message: str) -> Response:
        LOGGER.warning(message)
        return replace(r, warnings=r.warnings + (message,))

    def generate(self, task: EvalTask, variant: GenerationVariant, cfg: JudgeConfig) -> Response:
        if variant is GenerationVariant.BASE:
            return self.generate_base(task, cfg)
        if variant is GenerationVariant.CITATION:
            return self.generate_with_citations(task, cfg)
        source = self.generate(task, self.posthoc_source, cfg)
        return self.posthoc_attribute(source, task, cfg)

    def _run_one(self, task: EvalTask, variant: GenerationVariant, cfg: JudgeConfig) -> GenerationResult:
        try:
            response = self.generate(task, variant, cfg)
        except (AttributionError, ValueError) as e:
            LOGGER.warning("%s: generation failed: %s", task.question_id, e)
            return GenerationResult(task.question_id, variant.value, error=f"{type(e).__name__}: {e}",
                                    backend_failure=isinstance(e, BackendError))
        return GenerationResult(task.question_id, variant.value, response.raw, cfg.model_name,
                                cfg.effort_level, warnings=response.warnings)

    def run_generation(self, tasks: Sequence[EvalTask], variant: GenerationVariant, cfg: JudgeConfig,
                       effort_level: Optional[str] = None) -> GenerationRun:
        """One result per task, in input order; failures are recorded, never raised."""
        if effort_level is not None:
            cfg = JudgeConfig.model_validate({**cfg.model_dump(), "effort_level": effort_level})
        LOGGER.info("Generating %d responses (variant=%s, model=%s, effort=%s)",
                    len(tasks), variant.value, cfg.model_name, cfg.effort_level)
        with ThreadPoolExecutor(max_workers=self.width) as pool:
            futures = pool.map(lambda task: self._run_one(task, variant, cfg), tasks)
            results = list(tqdm(futures, total=len(tasks), desc=f"generate[{variant.value}]",
                                disable=not self.show_progress))
        return GenerationRun(results)

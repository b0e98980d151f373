"""Uniform access to LLM/MLLM judges.

Every judge call goes through :meth:`JudgeGateway.complete`: the prompt is
rendered from a template, keyed together with the model and attached media,
answered from the response cache when possible and otherwise sent to the
configured backend with bounded in-flight requests and tenacity retries.
"""

import contextlib
import contextvars
import hashlib
import json
import logging
import re
import string
import threading
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Literal, Mapping, Optional, Protocol, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt, wait_exponential_jitter

from .Citations import (AtomicFact, Sentence, dedupe_citations, extract_citations,
                        scan_citation_groups, segment_sentences)
from .Errors import BackendError, ConfigError, JudgeError, TransientBackendError, VerdictParseError
from .ResponseCache import ResponseCache

LOGGER = logging.getLogger(__name__)

# Requests made under JudgeGateway.tally(); None outside a tally.
_TALLY: "contextvars.ContextVar[Optional[Counter]]" = contextvars.ContextVar("judge_tally", default=None)

TEMPLATE_DIR = Path(__file__).resolve().parent.parent / "templates"
VERDICT_NUDGE = "Answer only YES or NO."


class JudgeConfig(BaseModel):
    """One judge slot: which backend, which model and how to prompt it."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    backend_id: str = "openai"
    model_name: str
    prompt_style: Literal["simple", "cot", "json"] = "simple"
    temperature: float = Field(default=0.0, ge=0.0)
    max_retries: int = Field(default=2, ge=0, le=10)
    effort_level: Optional[Literal["minimal", "low", "medium", "high"]] = None
    endpoint: Optional[str] = None
    api_key_env: Optional[str] = None
    media_policy: Literal["inline", "file_ref"] = "file_ref"
    max_in_flight: int = Field(default=4, ge=1)
    effort_param: Optional[str] = None
    request_timeout_s: float = Field(default=120.0, gt=0)


@dataclass(frozen=True)
class MediaAttachment:
    path: Path
    modality: str
    label: str
    digest: str


@dataclass(frozen=True)
class JudgeRequest:
    task: str
    prompt: str
    config: JudgeConfig
    media: Tuple[MediaAttachment, ...] = ()
    source_text: Optional[str] = None


@dataclass(frozen=True)
class Verdict:
    label: bool
    raw: str
    rationale: Optional[str] = None

    def to_dict(self) -> Dict[str, object]:
        return {"label": self.label, "rationale": self.rationale, "raw": self.raw}


@dataclass(frozen=True)
class JudgeCacheKey:
    digest: str

    @classmethod
    def build(cls, cfg: JudgeConfig, prompt: str, media: Sequence[MediaAttachment] = ()) -> "JudgeCacheKey":
        payload = {
            "model_name": cfg.model_name,
            "prompt_style": cfg.prompt_style,
            "prompt": prompt,
            "media": [m.digest for m in media],
        }
        if cfg.effort_level is not None:
            payload["effort_level"] = cfg.effort_level
        canonical = json.dumps(payload, sort_keys=True, ensure_ascii=False)
        return cls(hashlib.sha256(canonical.encode("utf-8")).hexdigest())


class JudgeBackend(Protocol):
    def complete(self, request: JudgeRequest) -> str:
        ...


class PromptLibrary:
    """Text templates with named ``str.format`` placeholders, loaded once."""

    def __init__(self, template_dir: Optional[Path] = None):
        self.template_dir = Path(template_dir) if template_dir else TEMPLATE_DIR
        manifest_path = self.template_dir / "templates.json"
        try:
            with manifest_path.open("r", encoding="utf-8") as f:
                self.manifest: Dict[str, Dict[str, object]] = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Cannot read template manifest {manifest_path}: {type(e).__name__} - {e}")
        self._cache: Dict[str, str] = {}
        self._lock = threading.Lock()

    def missing(self) -> List[str]:
        return [name for name in self.manifest if not (self.template_dir / f"{name}.txt").is_file()]

    def placeholders(self, name: str) -> List[str]:
        return sorted({field for _, field, _, _ in string.Formatter().parse(self.load(name)) if field})

    def load(self, name: str) -> str:
        with self._lock:
            if name not in self._cache:
                if name not in self.manifest:
                    raise ConfigError(f"Unknown prompt template: {name}")
                path = self.template_dir / f"{name}.txt"
                if not path.is_file():
                    raise ConfigError(f"Prompt template not found: {path}")
                self._cache[name] = path.read_text(encoding="utf-8")
            return self._cache[name]

    def render(self, name: str, **fields: object) -> str:
        template = self.load(name)
        try:
            return template.format(**fields)
        except KeyError as e:
            raise ConfigError(f"Template {name} needs placeholder {e}") from e


# --- verdict parsing -------------------------------------------------------

_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL | re.IGNORECASE)
_UPPER_TOKEN_RE = re.compile(r"\b(YES|NO)\b")
_ANY_TOKEN_RE = re.compile(r"\b(yes|no)\b", re.IGNORECASE)
_REASONING_RE = re.compile(r"reasoning\s*:\s*(.*?)(?:\n\s*answer\s*:|$)", re.IGNORECASE | re.DOTALL)


def json_object(raw: str) -> Optional[dict]:
    fenced = _FENCE_RE.search(raw)
    text = fenced.group(1) if fenced else raw
    start, end = text.find("{"), text.rfind("}")
    if start == -1 or end <= start:
        return None
    try:
        parsed = json.loads(text[start:end + 1])
    except json.JSONDecodeError:
        return None
    return parsed if isinstance(parsed, dict) else None


def _token_label(raw: str) -> Optional[bool]:
    tokens = _UPPER_TOKEN_RE.findall(raw) or _ANY_TOKEN_RE.findall(raw)
    return tokens[-1].upper() == "YES" if tokens else None


def parse_verdict(raw: str, prompt_style: str) -> Verdict:
    """YES/NO verdict from judge text.

    Simple and CoT outputs use the final standalone YES/NO token (uppercase
    tokens win over lowercase ones). JSON outputs read the ``label`` field and
    fall back to the token rule when no object can be decoded.
    """
    if prompt_style == "json":
        obj = json_object(raw)
        if obj is not None and "label" in obj:
            label = obj["label"]
            if isinstance(label, bool):
                value = label
            else:
                value = _token_label(str(label))
            if value is not None:
                rationale = obj.get("reasoning") or obj.get("evidence_description")
                return Verdict(label=value, raw=raw, rationale=str(rationale) if rationale else None)
    value = _token_label(raw)
    if value is None:
        raise VerdictParseError(raw)
    rationale = None
    if prompt_style == "cot":
        match = _REASONING_RE.search(raw)
        rationale = match.group(1).strip() if match else None
    return Verdict(label=value, raw=raw, rationale=rationale or None)


# --- decomposition output ------------------------------------------------

_BULLET_RE = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s+(.*\S)\s*$")


def parse_fact_lines(raw: str) -> List[str]:
    return [m.group(1) for m in map(_BULLET_RE.match, raw.splitlines()) if m]


def _group_layout(text: str) -> List[Tuple[Tuple, ...]]:
    """Citation groups of each sentence, in order."""
    return [tuple(tuple(group) for _, _, group, _ in scan_citation_groups(s.raw_text) if group is not None)
            for s in segment_sentences(text)]


_OUTPUT_LABEL_RE = re.compile(r"^\s*\**\s*output[^:\n]{0,40}:\s*\**\s*", re.IGNORECASE)


def _strip_fences(raw: str) -> str:
    fenced = _FENCE_RE.search(raw)
    text = (fenced.group(1) if fenced else raw).strip()
    return _OUTPUT_LABEL_RE.sub("", text, count=1).strip()


class JudgeGateway:
    """Shared entry point for every judge-backed task.

    ``backends`` maps a ``backend_id`` to an object with ``complete(request)``.
    Calls are counted per task before the cache is consulted, so the counts are
    the request budget of a run; ``transport_counts`` only grows on cache misses.
    """

    def __init__(self, backends: Mapping[str, JudgeBackend], cache: Optional[ResponseCache] = None,
                 prompts: Optional[PromptLibrary] = None, retry_initial_s: float = 1.0,
                 retry_max_s: float = 20.0):
        self.backends = dict(backends)
        self.cache = cache if cache is not None else ResponseCache()
        self.prompts = prompts or PromptLibrary()
        self.retry_initial_s = retry_initial_s
        self.retry_max_s = retry_max_s
        self.request_counts: Counter = Counter()
        self.transport_counts: Counter = Counter()
        self.cache_hits = 0
        self._count_lock = threading.Lock()
        self._semaphores: Dict[Tuple[str, str], threading.BoundedSemaphore] = {}
        self._semaphore_lock = threading.Lock()

    # -- transport ---------------------------------------------------------

    def _backend(self, cfg: JudgeConfig) -> JudgeBackend:
        try:
            return self.backends[cfg.backend_id]
        except KeyError:
            raise ConfigError(f"No judge backend registered for '{cfg.backend_id}'")

    def _semaphore(self, cfg: JudgeConfig) -> threading.BoundedSemaphore:
        slot = (cfg.backend_id, cfg.model_name)
        with self._semaphore_lock:
            if slot not in self._semaphores:
                self._semaphores[slot] = threading.BoundedSemaphore(cfg.max_in_flight)
            return self._semaphores[slot]

    def _transport(self, request: JudgeRequest) -> str:
        backend = self._backend(request.config)
        retrying = Retrying(
            retry=retry_if_exception_type(TransientBackendError),
            stop=stop_after_attempt(request.config.max_retries + 1),
            wait=wait_exponential_jitter(initial=self.retry_initial_s, max=self.retry_max_s,
                                         jitter=self.retry_initial_s),
            reraise=True,
        )
        attempts = 0
        try:
            for attempt in retrying:
                with attempt:
                    attempts = attempt.retry_state.attempt_number
                    with self._semaphore(request.config):
                        return backend.complete(request)
        except BackendError:
            raise
        except JudgeError as e:
            raise BackendError(attempts, e) from e
        except Exception as e:
            raise BackendError(attempts, e) from e
        raise BackendError(attempts)

    def call_with_cache(self, key: JudgeCacheKey, request: JudgeRequest) -> str:
        cached = self.cache.get(key.digest)
        if cached is not None:
            with self._count_lock:
                self.cache_hits += 1
            LOGGER.debug("Judge cache hit: task=%s key=%s", request.task, key.digest[:12])
            return cached
        raw = self._transport(request)
        with self._count_lock:
            self.transport_counts[request.task] += 1
        LOGGER.debug("Judge call: task=%s model=%s key=%s", request.task,
                     request.config.model_name, key.digest[:12])
        self.cache.put(key.digest, raw, task=request.task, model_name=request.config.model_name)
        return raw

    def complete(self, task: str, prompt: str, cfg: JudgeConfig,
                 media: Sequence[MediaAttachment] = (), source_text: Optional[str] = None) -> str:
        """Run one judge request. ``source_text`` is the text a rewrite task works on;
        it rides along for backends that echo it and is not part of the cache key."""
        media = tuple(media)
        tally = _TALLY.get()
        with self._count_lock:
            self.request_counts[task] += 1
            if tally is not None:
                tally[task] += 1
        request = JudgeRequest(task=task, prompt=prompt, config=cfg, media=media, source_text=source_text)
        return self.call_with_cache(JudgeCacheKey.build(cfg, prompt, media), request)

    @contextlib.contextmanager
    def tally(self) -> Iterator[Counter]:
        """Count the requests made in this context only.

        Worker threads see the tally when they run inside a copy of the
        caller's context (see ``contextvars.copy_context``).
        """
        counter: Counter = Counter()
        token = _TALLY.set(counter)
        try:
            yield counter
        finally:
            _TALLY.reset(token)

    def render(self, name: str, **fields: object) -> str:
        return self.prompts.render(name, **fields)

    def counts(self) -> Dict[str, object]:
        with self._count_lock:
            return {
                "requests": dict(sorted(self.request_counts.items())),
                "transport": dict(sorted(self.transport_counts.items())),
                "cache_hits": self.cache_hits,
            }

    # -- verdict tasks -----------------------------------------------------

    def verdict(self, task: str, prompt: str, cfg: JudgeConfig,
                media: Sequence[MediaAttachment] = ()) -> Verdict:
        """Judge call answered with YES/NO; one nudged retry on unparseable output."""
        raw = self.complete(task, prompt, cfg, media)
        try:
            return parse_verdict(raw, cfg.prompt_style)
        except VerdictParseError:
            LOGGER.debug("Unparseable %s verdict, retrying with nudge", task)
        raw = self.complete(task, f"{prompt}\n\n{VERDICT_NUDGE}", cfg, media)
        return parse_verdict(raw, "simple")

    def judge_verifiable(self, s: Sentence, cfg: JudgeConfig) -> Verdict:
        if not s.text.strip():
            raise ValueError("Cannot judge verifiability of an empty sentence")
        prompt = self.render(f"verifiability_{cfg.prompt_style}", sentence=s.text)
        return self.verdict("verifiability", prompt, cfg)

    def judge_claim_verifiable(self, text: str, cfg: JudgeConfig) -> Verdict:
        return self.judge_verifiable(Sentence(0, text, text), cfg)

    def judge_entailment(self, fact: AtomicFact, segments: Sequence, cfg: JudgeConfig,
                         task: str = "entailment") -> Verdict:
        """``segments`` are SegmentHandles (anything with ``as_attachment()``)."""
        if not segments:
            raise ValueError("Entailment needs at least one segment")
        attachments = [segment.as_attachment() for segment in segments]
        for attachment in attachments:
            if not attachment.path.is_file() or attachment.path.stat().st_size == 0:
                raise BackendError(0, JudgeError(f"Empty media segment {attachment.path}"))
        context = "\n".join(f"Segment {i}: {a.label}" for i, a in enumerate(attachments, start=1))
        prompt = self.render(f"entailment_{cfg.prompt_style}", fact=fact.text, context=context)
        return self.verdict(task, prompt, cfg, attachments)

    # -- rewrite tasks -----------------------------------------------------

    def decontextualize(self, response_text: str, cfg: JudgeConfig,
                        warnings: Optional[List[str]] = None) -> str:
        """Resolve references forward-only; every citation group must stay on its sentence."""
        if not response_text.strip():
            return response_text
        prompt = self.render("decontextualize", input_text=response_text)
        rewritten = _strip_fences(self.complete("decontextualize", prompt, cfg, source_text=response_text))
        if rewritten and _group_layout(rewritten) == _group_layout(response_text):
            return rewritten
        message = "Decontextualization changed or moved the citation groups; keeping the original text"
        LOGGER.warning(message)
        if warnings is not None:
            warnings.append(message)
        return response_text

    def decompose_sentence(self, s: Sentence, cfg: JudgeConfig,
                           warnings: Optional[List[str]] = None,
                           text: Optional[str] = None) -> List[AtomicFact]:
        """Split one cited sentence into atomic facts with validated citations.

        ``text`` overrides the sentence text shown to the judge (used for the
        decontextualized rewrite) while citations stay tied to ``s``.
        """
        source = text if text is not None else s.raw_text
        prompt = self.render("decompose", sentence=source)
        lines = parse_fact_lines(self.complete("decompose", prompt, cfg, source_text=source))
        if not lines:
            retry_prompt = f"{prompt}\n\nReturn at least one fact as a line starting with '- '."
            lines = parse_fact_lines(self.complete("decompose", retry_prompt, cfg, source_text=source))
        facts = []
        allowed = set(s.citations)
        for line in lines:
            line_warnings: List[str] = []
            fact_text, citations = extract_citations(line, line_warnings)
            for w in line_warnings:
                _note(warnings, f"sentence {s.index}: {w}")
            if not fact_text or any(g is not None or e is not None for _, _, g, e in scan_citation_groups(fact_text)):
                continue
            kept = [c for c in citations if c in allowed]
            for dropped in (c for c in citations if c not in allowed):
                _note(warnings, f"sentence {s.index}: dropped citation {dropped} not cited by the sentence")
            facts.append(AtomicFact(fact_text, s.index, dedupe_citations(kept) or tuple(s.citations)))
        if not facts:
            _note(warnings, f"sentence {s.index}: empty decomposition, using the sentence as one fact")
            facts = [AtomicFact(s.text, s.index, tuple(s.citations))]
        return facts


def _note(warnings: Optional[List[str]], message: str) -> None:
    LOGGER.warning(message)
    if warnings is not None:
        warnings.append(message)

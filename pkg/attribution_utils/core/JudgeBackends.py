import base64
import hashlib
import json
import logging
import mimetypes
import os
import random
import threading
import time
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

from openai import (APIConnectionError, APITimeoutError, InternalServerError, OpenAI,
                    RateLimitError)
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from .Errors import ConfigError, JudgeError, TransientBackendError
from .JudgeGateway import JudgeConfig, JudgeRequest

LOGGER = logging.getLogger(__name__)

TASK_KINDS = (
    "verifiability", "entailment", "decontextualize", "decompose", "generate", "posthoc",
    "holistic", "disentangled", "plan", "find", "describe", "synthesize", "refine",
)
VERDICT_TASKS = frozenset({"verifiability", "entailment", "refine", "find"})


class OpenAIJudgeBackend:
    """Chat-completions transport for any OpenAI-compatible endpoint."""

    def __init__(self, client_factory: Optional[Callable[..., OpenAI]] = None):
        self._client_factory = client_factory or OpenAI
        self._clients: Dict[Tuple[Optional[str], Optional[str]], OpenAI] = {}
        self._lock = threading.Lock()
        self._warned_effort = set()

    def _client(self, cfg: JudgeConfig) -> OpenAI:
        slot = (cfg.endpoint, cfg.api_key_env)
        with self._lock:
            if slot not in self._clients:
                api_key = os.environ.get(cfg.api_key_env) if cfg.api_key_env else None
                if cfg.api_key_env and not api_key:
                    raise ConfigError(f"Environment variable {cfg.api_key_env} is not set")
                self._clients[slot] = self._client_factory(
                    base_url=cfg.endpoint, api_key=api_key, timeout=cfg.request_timeout_s, max_retries=0)
            return self._clients[slot]

    @staticmethod
    def _media_part(path: Path, modality: str, label: str, policy: str) -> List[Dict[str, object]]:
        if policy == "file_ref":
            return [{"type": "text", "text": f"{label}: {path}"}]
        data = base64.b64encode(path.read_bytes()).decode("ascii")
        mime = mimetypes.guess_type(path.name)[0] or "application/octet-stream"
        label_part = {"type": "text", "text": label}
        if modality == "audio":
            audio_format = path.suffix.lstrip(".").lower() or "wav"
            return [label_part, {"type": "input_audio", "input_audio": {"data": data, "format": audio_format}}]
        return [label_part, {"type": "image_url", "image_url": {"url": f"data:{mime};base64,{data}"}}]

    def _messages(self, request: JudgeRequest) -> List[Dict[str, object]]:
        if not request.media:
            return [{"role": "user", "content": request.prompt}]
        parts: List[Dict[str, object]] = []
        for media in request.media:
            parts.extend(self._media_part(media.path, media.modality, media.label, request.config.media_policy))
        parts.append({"type": "text", "text": request.prompt})
        return [{"role": "user", "content": parts}]

    def complete(self, request: JudgeRequest) -> str:
        cfg = request.config
        kwargs: Dict[str, object] = {
            "model": cfg.model_name,
            "messages": self._messages(request),
            "temperature": cfg.temperature,
        }
        if cfg.effort_level is not None:
            if cfg.effort_param:
                kwargs["extra_body"] = {cfg.effort_param: cfg.effort_level}
            elif cfg.model_name not in self._warned_effort:
                self._warned_effort.add(cfg.model_name)
                LOGGER.warning("No effort_param configured for %s; ignoring effort level %s",
                               cfg.model_name, cfg.effort_level)
        try:
            response = self._client(cfg).chat.completions.create(**kwargs)
        except (RateLimitError, APITimeoutError, APIConnectionError, InternalServerError) as e:
            raise TransientBackendError(f"{type(e).__name__}: {e}") from e
        if not response.choices or response.choices[0].message.content is None:
            raise JudgeError(f"{cfg.model_name} returned no content")
        return response.choices[0].message.content


# --- deterministic mock -------------------------------------------------


class MockRule(BaseModel):
    model_config = ConfigDict(extra="forbid")

    task: Optional[str] = None
    contains: Optional[str] = None
    media_contains: Optional[str] = None
    response: Optional[str] = None
    responses: Optional[List[str]] = None
    error: bool = False
    per_prompt: bool = True

    @model_validator(mode="after")
    def _one_outcome(self) -> "MockRule":
        outcomes = [self.response is not None, bool(self.responses), self.error]
        if sum(outcomes) != 1:
            raise ValueError("a mock rule needs exactly one of response, responses or error")
        if self.task is not None and self.task not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.task!r}")
        return self

    def matches(self, request: JudgeRequest) -> bool:
        if self.task is not None and self.task != request.task:
            return False
        if self.contains is not None and self.contains not in request.prompt:
            return False
        if self.media_contains is not None and not any(self.media_contains in m.label for m in request.media):
            return False
        return True


class MockScript(BaseModel):
    model_config = ConfigDict(extra="forbid")

    rules: List[MockRule] = []
    defaults: Dict[str, str] = {}


@dataclass(frozen=True)
class MockCall:
    task: str
    model_name: str
    prompt_digest: str
    media_labels: Tuple[str, ...]


def _builtin_response(request: JudgeRequest) -> str:
    if request.task in VERDICT_TASKS:
        return "YES"
    if request.task in ("decontextualize", "posthoc"):
        return request.source_text or ""
    if request.task == "decompose":
        return f"- {request.source_text}" if request.source_text else ""
    if request.task == "holistic":
        return "3"
    if request.task == "disentangled":
        return json.dumps({"coverage": 1.0, "recall": 1.0, "precision": 1.0})
    if request.task == "describe":
        return "No notable content."
    return "Reasoning: No evidence reviewed.\nAnswer: A"


class MockJudgeBackend:
    """Scripted, deterministic judge used by tests and ``--mock`` runs.

    Responses come from the first matching rule, then the per-task default,
    then a built-in default. A ``responder`` callable, when given, replaces the
    script entirely; it may return text or an exception instance to raise.
    """

    def __init__(self, script: Optional[Union[MockScript, Dict[str, object]]] = None,
                 responder: Optional[Callable[[JudgeRequest], Union[str, BaseException]]] = None,
                 delay_s: float = 0.0, seed: int = 0):
        if isinstance(script, dict):
            try:
                script = MockScript.model_validate(script)
            except ValidationError as e:
                raise ConfigError(f"Invalid mock script: {e}") from e
        self.script = script or MockScript()
        self.responder = responder
        self.delay_s = delay_s
        self._rng = random.Random(seed)
        self._lock = threading.Lock()
        self._sequence_positions: Counter = Counter()
        self.calls: Counter = Counter()
        self.audit: List[MockCall] = []

    @classmethod
    def from_file(cls, path: Union[str, Path], **kwargs) -> "MockJudgeBackend":
        path = Path(path)
        try:
            with path.open("r", encoding="utf-8") as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Failed to load mock script {path}: {type(e).__name__} - {e}")
        return cls(data, **kwargs)

    def _scripted(self, request: JudgeRequest, prompt_digest: str) -> str:
        for index, rule in enumerate(self.script.rules):
            if not rule.matches(request):
                continue
            if rule.error:
                raise TransientBackendError(f"scripted failure for task {request.task}")
            if rule.response is not None:
                return rule.response
            slot = (index, prompt_digest if rule.per_prompt else "")
            with self._lock:
                position = self._sequence_positions[slot]
                self._sequence_positions[slot] += 1
            return rule.responses[min(position, len(rule.responses) - 1)]
        if request.task in self.script.defaults:
            return self.script.defaults[request.task]
        return _builtin_response(request)

    def complete(self, request: JudgeRequest) -> str:
        prompt_digest = hashlib.sha256(request.prompt.encode("utf-8")).hexdigest()
        with self._lock:
            self.calls[request.task] += 1
            self.audit.append(MockCall(request.task, request.config.model_name, prompt_digest,
                                       tuple(m.label for m in request.media)))
            delay = self._rng.uniform(0, self.delay_s) if self.delay_s else 0.0
        if delay:
            time.sleep(delay)
        if self.responder is not None:
            outcome = self.responder(request)
            if isinstance(outcome, BaseException):
                raise outcome
            return outcome
        return self._scripted(request, prompt_digest)

    def calls_for(self, task: str) -> List[MockCall]:
        with self._lock:
            return [call for call in self.audit if call.task == task]


def build_backends(mock_script: Optional[Union[str, Path]] = None,
                   mock_delay_s: float = 0.0) -> Dict[str, object]:
    """Backend registry keyed by ``backend_id``."""
    backends: Dict[str, object] = {"openai": OpenAIJudgeBackend()}
    if mock_script is not None:
        backends["mock"] = MockJudgeBackend.from_file(mock_script, delay_s=mock_delay_s)
    else:
        backends["mock"] = MockJudgeBackend(delay_s=mock_delay_s)
    return backends

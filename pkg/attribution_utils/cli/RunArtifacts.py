"""Line-delimited JSON files, their schemas, and run manifests.

Every output is written to a temporary file next to its destination and
renamed into place, so an interrupted run never leaves a truncated file
under the final name.
"""

import contextlib
import hashlib
import json
import logging
import os
import platform
import sys
import tempfile
import time
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Literal, Optional, Sequence, Type, TypeVar, Union

import psutil
from pydantic import BaseModel, ConfigDict, ValidationError

from ..benchmarks.GenerationRunner import EvalTask
from ..core.Errors import ConfigError
from ..core.MediaStore import ManifestLine

LOGGER = logging.getLogger(__name__)

PACKAGE_NAME = "attribution-utils"
TRACKED_DISTRIBUTIONS = ("numpy", "pandas", "matplotlib", "psutil", "openai", "tenacity",
                         "pydantic", "scipy", "scikit-learn", "tqdm")

M = TypeVar("M", bound=BaseModel)

__all__ = [
    "ManifestLine", "TaskLine", "ResponseLine", "GoldLine", "ScoreLine", "RunManifest",
    "read_jsonl", "atomic_target", "write_text_atomic", "write_jsonl_atomic", "write_json_atomic", "file_sha256",
]


class TaskLine(BaseModel):
    model_config = ConfigDict(extra="forbid")

    question_id: str
    question: str
    options: Union[List[str], Dict[str, str]]
    gold_answer: Optional[str] = None

    def to_task(self) -> EvalTask:
        return EvalTask.build(self.question_id, self.question, self.options, self.gold_answer)


class ResponseLine(BaseModel):
    model_config = ConfigDict(extra="forbid")

    question_id: str
    variant: str
    raw: str
    model_name: Optional[str] = None
    effort_level: Optional[str] = None


class GoldLine(BaseModel):
    model_config = ConfigDict(extra="forbid")

    unit_id: str
    unit_kind: Literal["sentence", "fact", "response"]
    gold: Union[bool, float, List[str], Dict[str, Optional[float]]]
    annotator_id: Optional[str] = None


class ScoreLine(BaseModel):
    """One scorer's scores for one response (baseline judges and our metrics alike)."""

    model_config = ConfigDict(extra="forbid")

    question_id: str
    scorer: str
    coverage: Optional[float] = None
    precision: Optional[float] = None
    recall: Optional[float] = None
    grounding_score: Optional[float] = None
    holistic: Optional[int] = None
    error: Optional[str] = None


def read_jsonl(path: Union[str, Path], model: Optional[Type[M]] = None) -> List[Any]:
    """Parse a JSON Lines file, validating each line against ``model`` when given."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Input file not found: {path}")
    rows: List[Any] = []
    with path.open("r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
                rows.append(model.model_validate(data) if model is not None else data)
            except (json.JSONDecodeError, ValidationError) as e:
                raise ConfigError(f"{path}:{line_no}: invalid line: {e}") from e
    return rows


@contextlib.contextmanager
def atomic_target(path: Union[str, Path]) -> Iterator[Path]:
    """Temporary file next to ``path``, renamed onto it when the block succeeds."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    os.close(fd)
    try:
        yield Path(tmp_name)
        os.replace(tmp_name, path)
    finally:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)


def write_text_atomic(path: Union[str, Path], text: str) -> Path:
    with atomic_target(path) as tmp:
        with open(tmp, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
    return Path(path)


def _dump(obj: Any) -> Any:
    if isinstance(obj, BaseModel):
        return obj.model_dump()
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    return obj


def write_jsonl_atomic(path: Union[str, Path], rows: Iterable[Any]) -> Path:
    text = "".join(json.dumps(_dump(row), ensure_ascii=False) + "\n" for row in rows)
    return write_text_atomic(Path(path), text)


def write_json_atomic(path: Union[str, Path], document: Any) -> Path:
    return write_text_atomic(Path(path), json.dumps(_dump(document), ensure_ascii=False, indent=2) + "\n")


def file_sha256(path: Union[str, Path]) -> Optional[str]:
    path = Path(path)
    if not path.is_file():
        return None
    digest = hashlib.sha256()
    with path.open("rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _versions() -> Dict[str, Optional[str]]:
    versions: Dict[str, Optional[str]] = {}
    for name in (PACKAGE_NAME,) + TRACKED_DISTRIBUTIONS:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = None
    return versions


class RunManifest:
    """Provenance for one command: enough to replay it against the response cache."""

    def __init__(self, command: str, argv: Sequence[str], config_digest: Optional[str] = None):
        self.command = command
        self.argv = list(argv)
        self.config_digest = config_digest
        self.inputs: Dict[str, Optional[str]] = {}
        self.outputs: List[str] = []
        self.started_at = datetime.now(timezone.utc).isoformat()
        self._t0 = time.perf_counter()
        self._process = psutil.Process()
        self._peak_rss = 0
        self.sample()

    def sample(self) -> None:
        """Record current RSS; the manifest keeps the maximum seen."""
        try:
            self._peak_rss = max(self._peak_rss, self._process.memory_info().rss)
        except (psutil.NoSuchProcess, psutil.AccessDenied):
            pass

    def add_input(self, path: Union[str, Path]) -> None:
        self.inputs[str(path)] = file_sha256(path)

    def add_output(self, path: Union[str, Path]) -> None:
        self.outputs.append(str(path))

    def to_dict(self, counts: Optional[Dict[str, Any]] = None, extra: Optional[Dict[str, Any]] = None
                ) -> Dict[str, Any]:
        self.sample()
        document = {
            "command": self.command,
            "argv": self.argv,
            "config_digest": self.config_digest,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": self.outputs,
            "versions": _versions(),
            "python": sys.version.split()[0],
            "platform": platform.platform(),
            "started_at": self.started_at,
            "finished_at": datetime.now(timezone.utc).isoformat(),
            "elapsed_s": round(time.perf_counter() - self._t0, 3),
            "judge_calls": counts or {},
            "peak_rss_mb": round(self._peak_rss / (1024 ** 2), 2),
            "cpu_count": psutil.cpu_count(),
        }
        document.update(extra or {})
        return document

    def write(self, out_dir: Union[str, Path], counts: Optional[Dict[str, Any]] = None,
              extra: Optional[Dict[str, Any]] = None) -> Path:
        path = write_json_atomic(Path(out_dir) / "run_manifest.json", self.to_dict(counts, extra))
        LOGGER.info("Run manifest written to %s", path)
        return path

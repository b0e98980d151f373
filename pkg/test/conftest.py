import json
import sys
from pathlib import Path

import pytest

from attribution_utils.benchmarks.GenerationRunner import EvalTask
from attribution_utils.cli.RunArtifacts import TaskLine, read_jsonl
from attribution_utils.core.JudgeBackends import MockJudgeBackend
from attribution_utils.core.JudgeGateway import JudgeConfig, JudgeGateway
from attribution_utils.core.MediaStore import MediaStore, load_manifest
from attribution_utils.core.ResponseCache import ResponseCache

TEST_DIR = Path(__file__).resolve().parent
FIXTURES = TEST_DIR / "fixtures"
MANIFEST = FIXTURES / "manifest.jsonl"
TASKS = FIXTURES / "tasks.jsonl"
MOCK_SCRIPT = FIXTURES / "mock_script.json"
PROGRAMS = FIXTURES / "programs"

# Writes "<input>:<start>-<end>" so every span gets its own clip bytes.
STUB_EXTRACTOR = [sys.executable, "-c",
                  "import sys; open(sys.argv[4], 'w').write(sys.argv[1] + ':' + sys.argv[2] + '-' + sys.argv[3])",
                  "{input}", "{start}", "{end}", "{output}"]

SLOTS = ("verifiability", "decomposition", "entailment", "generation", "retrieval")


class InlineMediaStore(MediaStore):
    """MediaStore that writes clips itself instead of starting an extractor process."""

    def _extract(self, source, span, clip_path):
        clip_path.parent.mkdir(parents=True, exist_ok=True)
        clip_path.write_text(f"{source}:{span.start_s}-{span.end_s}", encoding="utf-8")
        with self._guard:
            self.extractions += 1


def judge_config(model_name: str = "mock-judge", **changes) -> JudgeConfig:
    return JudgeConfig(**{"backend_id": "mock", "model_name": model_name, **changes})


def make_judges(**changes):
    return {slot: judge_config(f"mock-{slot}", **changes) for slot in SLOTS}


def make_gateway(backend: MockJudgeBackend, cache: ResponseCache = None) -> JudgeGateway:
    return JudgeGateway({"mock": backend}, cache or ResponseCache(), retry_initial_s=0, retry_max_s=0)


def program_text(name: str) -> str:
    return (PROGRAMS / f"{name}.txt").read_text(encoding="utf-8")


@pytest.fixture
def judges():
    return make_judges()


@pytest.fixture
def manifest():
    return load_manifest(MANIFEST)


@pytest.fixture
def media(manifest, tmp_path):
    return InlineMediaStore(manifest, tmp_path / "cache", {"command": STUB_EXTRACTOR})


@pytest.fixture
def subprocess_media(manifest, tmp_path):
    return MediaStore(manifest, tmp_path / "cache", {"command": STUB_EXTRACTOR, "max_parallel": 2, "timeout_s": 30})


@pytest.fixture
def tasks():
    return {line.question_id: line.to_task() for line in read_jsonl(TASKS, TaskLine)}


@pytest.fixture
def task_q1(tasks) -> EvalTask:
    return tasks["q1"]


@pytest.fixture
def config_file(tmp_path):
    """test_config.json with the stub extractor and a per-test cache directory."""
    with (TEST_DIR / "test_config.json").open("r", encoding="utf-8") as f:
        data = json.load(f)
    data["extractor"]["command"] = list(STUB_EXTRACTOR)
    data["cache_dir"] = str(tmp_path / "cache")
    path = tmp_path / "attribution.json"
    path.write_text(json.dumps(data, indent=2), encoding="utf-8")
    return path

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Optional

from pydantic import ValidationError

from ..core.Errors import ConfigError
from ..core.JudgeGateway import JudgeConfig, PromptLibrary

JUDGE_SLOTS = ("verifiability", "decomposition", "entailment", "generation", "retrieval")
EXTRACTOR_PLACEHOLDERS = ("{input}", "{start}", "{end}", "{output}")
DEFAULT_FLAGS = {
    "atomic_verifiability": False,
    "refinement": True,
    "refine_synthesize": False,
    "posthoc_source": "base",
    "tag_untagged_with_judge": True,
}


class RunConfig:

    def __init__(self, config_path: Optional[Path] = None, config_file: str = "attribution.json",
                 overrides: Optional[Dict[str, Any]] = None):
        self.config_path = config_path
        self.config_file = config_file
        self.config_data = self.load_config(config_path, config_file)
        for key, value in (overrides or {}).items():
            if value is not None:
                self.config_data[key] = value
        self._validate_config()
        self.judges = self._build_judges()

    @staticmethod
    def load_config(config_path: Optional[Path] = None, config_file: Optional[str] = None) -> Dict[str, Any]:
        """Load the user config if one exists, otherwise the bundled default."""

        default_config_path = Path(__file__).parent / "default_config.json"

        # A directory without the config file falls back to the default; a missing file path is an error.
        if config_path is not None:
            config_path = Path(config_path)
            if config_path.is_dir():
                config_path = config_path / (config_file or "attribution.json")
                if not config_path.is_file():
                    config_path = None
            elif not config_path.is_file():
                raise ConfigError(f"Config file not found: {config_path}")
        if config_path is not None:
            try:
                with config_path.open("r", encoding="utf-8") as f:
                    return json.load(f)
            except (PermissionError, json.JSONDecodeError, UnicodeDecodeError) as e:
                raise ConfigError(f"Failed to load user config {config_path}: {type(e).__name__} - {e}")

        if not default_config_path.is_file():
            raise ConfigError(f"Default config file not found: {default_config_path}")
        try:
            with default_config_path.open("r", encoding="utf-8") as f:
                return json.load(f)
        except (PermissionError, json.JSONDecodeError, UnicodeDecodeError) as e:
            raise ConfigError(f"Failed to load default config: {type(e).__name__} - {e}")

    def _validate_config(self):
        required_fields = [
            'judges',
            'concurrency',
            'cache_dir',
            'extractor',
            'segment_padding_s',
            'flags',
            'retrieval',
        ]
        for field in required_fields:
            if field not in self.config_data:
                raise ConfigError(f"Missing required config field: {field}")

        concurrency = self.config_data['concurrency']
        if not isinstance(concurrency, int) or concurrency < 1:
            raise ConfigError(f"concurrency must be a positive integer, got {concurrency!r}")
        padding = self.config_data['segment_padding_s']
        if not isinstance(padding, int) or padding < 0:
            raise ConfigError(f"segment_padding_s must be a non-negative integer, got {padding!r}")

        extractor = self.config_data['extractor']
        command = extractor.get('command') if isinstance(extractor, dict) else None
        if not isinstance(command, list) or not all(isinstance(part, str) for part in command):
            raise ConfigError("extractor.command must be a list of strings")
        joined = " ".join(command)
        for placeholder in EXTRACTOR_PLACEHOLDERS:
            if placeholder not in joined:
                raise ConfigError(f"extractor.command is missing the {placeholder} placeholder")
        if int(extractor.get('max_parallel', 1)) < 1:
            raise ConfigError("extractor.max_parallel must be at least 1")

        flags = {**DEFAULT_FLAGS, **self.config_data['flags']}
        unknown = set(flags) - set(DEFAULT_FLAGS)
        if unknown:
            raise ConfigError(f"Unknown flags: {sorted(unknown)}")
        if flags['posthoc_source'] not in ("base", "citation"):
            raise ConfigError(f"flags.posthoc_source must be 'base' or 'citation', got {flags['posthoc_source']!r}")
        self.config_data['flags'] = flags

        retrieval = self.config_data['retrieval']
        if retrieval.get('mode', 'windowed') not in ("windowed", "listing"):
            raise ConfigError(f"retrieval.mode must be 'windowed' or 'listing', got {retrieval.get('mode')!r}")
        if int(retrieval.get('window_s', 10)) < 1 or int(retrieval.get('stride_s', 5)) < 1:
            raise ConfigError("retrieval.window_s and retrieval.stride_s must be positive")

    def _build_judges(self) -> Dict[str, JudgeConfig]:
        slots = self.config_data['judges']
        judges = {}
        for slot in JUDGE_SLOTS:
            if slot not in slots:
                raise ConfigError(f"Missing judge slot: {slot}")
            if "api_key" in slots[slot]:
                raise ConfigError(f"judges.{slot} holds a literal api_key; name an environment variable in api_key_env")
            try:
                judges[slot] = JudgeConfig.model_validate(slots[slot])
            except ValidationError as e:
                raise ConfigError(f"Invalid judge slot '{slot}': {e}") from e
        return judges

    def judge(self, slot: str) -> JudgeConfig:
        try:
            return self.judges[slot]
        except KeyError:
            raise ConfigError(f"Unknown judge slot: {slot}")

    def with_judge(self, slot: str, **changes: Any) -> "RunConfig":
        """Copy of this config with one judge slot updated (used for effort sweeps)."""
        clone = copy.copy(self)
        clone.config_data = copy.deepcopy(self.config_data)
        clone.config_data['judges'][slot].update(changes)
        clone.judges = clone._build_judges()
        return clone

    def use_mock(self, script_path: Optional[Path]) -> None:
        """Route every judge slot to the scripted mock backend."""
        for slot in JUDGE_SLOTS:
            self.config_data['judges'][slot]['backend_id'] = "mock"
        self.config_data['mock_script'] = str(script_path) if script_path else None
        self.judges = self._build_judges()

    def flag(self, name: str) -> Any:
        return self.config_data['flags'][name]

    def get_property(self, property) -> Any:
        return self.config_data.get(property, None)

    @property
    def cache_dir(self) -> Optional[Path]:
        value = self.config_data['cache_dir']
        return Path(value) if value else None

    def check_assets(self, prompts: Optional[PromptLibrary] = None) -> PromptLibrary:
        """Fail fast on missing templates; create the cache directory."""
        prompts = prompts or PromptLibrary(self.get_property('template_dir'))
        missing = prompts.missing()
        if missing:
            raise ConfigError(f"Missing prompt templates in {prompts.template_dir}: {missing}")
        if self.cache_dir is not None:
            try:
                self.cache_dir.mkdir(parents=True, exist_ok=True)
            except OSError as e:
                raise ConfigError(f"Cannot create cache directory {self.cache_dir}: {e}")
        return prompts

    def to_dict(self) -> Dict[str, Any]:
        return copy.deepcopy(self.config_data)

    def digest(self) -> str:
        canonical = json.dumps(self.config_data, sort_keys=True, ensure_ascii=False, default=str)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

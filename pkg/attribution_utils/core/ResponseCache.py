import json
import logging
import os
import shutil
import tempfile
import threading
from collections import Counter
from pathlib import Path
from typing import Any, Dict, Optional, Union

LOGGER = logging.getLogger(__name__)


class ResponseCache:
    """Content-addressed store of raw judge responses.

    Entries live at ``<cache_dir>/<key[:2]>/<key>.json``. Writers for the same key
    are serialized in-process and land through an atomic rename, so readers never
    lock and concurrent processes never see half-written entries. Without a
    ``cache_dir`` the cache is an in-memory dict.
    """

    def __init__(self, cache_dir: Optional[Union[str, Path]] = None):
        self.cache_dir = Path(cache_dir) / "responses" if cache_dir else None
        self._memory: Dict[str, Dict[str, Any]] = {}
        self._locks: Dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()
        if self.cache_dir:
            self.cache_dir.mkdir(parents=True, exist_ok=True)

    def _entry_path(self, key: str) -> Path:
        return self.cache_dir / key[:2] / f"{key}.json"

    def _lock_for(self, key: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(key, threading.Lock())

    def get(self, key: str) -> Optional[str]:
        if self.cache_dir is None:
            entry = self._memory.get(key)
            return entry["response"] if entry else None
        path = self._entry_path(key)
        if not path.is_file():
            return None
        try:
            with path.open("r", encoding="utf-8") as f:
                return json.load(f)["response"]
        except (OSError, json.JSONDecodeError, KeyError) as e:
            LOGGER.warning("Ignoring unreadable cache entry %s: %s", path, e)
            return None

    def put(self, key: str, response: str, task: str = "", model_name: str = "") -> None:
        entry = {"key": key, "task": task, "model_name": model_name, "response": response}
        with self._lock_for(key):
            if self.cache_dir is None:
                self._memory[key] = entry
                return
            path = self._entry_path(key)
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
            try:
                with os.fdopen(fd, "w", encoding="utf-8") as f:
                    json.dump(entry, f, ensure_ascii=False)
                os.replace(tmp_name, path)
            except BaseException:
                Path(tmp_name).unlink(missing_ok=True)
                raise

    def _entries(self):
        if self.cache_dir is None:
            yield from self._memory.values()
            return
        for path in sorted(self.cache_dir.glob("*/*.json")):
            try:
                with path.open("r", encoding="utf-8") as f:
                    yield json.load(f)
            except (OSError, json.JSONDecodeError):
                continue

    def inspect(self) -> Dict[str, Any]:
        per_task = Counter(entry.get("task", "") for entry in self._entries())
        total_bytes = 0
        if self.cache_dir is not None:
            total_bytes = sum(p.stat().st_size for p in self.cache_dir.glob("*/*.json"))
        return {
            "location": str(self.cache_dir) if self.cache_dir else "memory",
            "entries": sum(per_task.values()),
            "bytes": total_bytes,
            "per_task": dict(sorted(per_task.items())),
        }

    def clear(self) -> int:
        removed = self.inspect()["entries"]
        if self.cache_dir is None:
            self._memory.clear()
        elif self.cache_dir.exists():
            shutil.rmtree(self.cache_dir)
            self.cache_dir.mkdir(parents=True, exist_ok=True)
        LOGGER.info("Cleared %d cached judge responses", removed)
        return removed

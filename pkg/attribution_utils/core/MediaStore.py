"""Question-to-media manifest and cited-segment extraction.

Segments are cut by an external command template (ffmpeg by default) and
stored under ``<cache_dir>/clips`` with content-addressed names, so the same
citation always maps to the same clip file and digest.
"""

import hashlib
import json
import logging
import os
import subprocess
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .Citations import Citation, Modality, TimeSpan, format_citation
from .Errors import ExtractorError, ManifestError, ModalityMissingError, UnknownQuestionError
from .JudgeGateway import MediaAttachment

LOGGER = logging.getLogger(__name__)

POINT_WINDOW_S = 1


class ManifestLine(BaseModel):
    model_config = ConfigDict(extra="forbid")

    question_id: str
    video_path: Optional[str] = None
    audio_path: Optional[str] = None
    duration_s: int = Field(ge=0)

    @model_validator(mode="after")
    def _has_media(self) -> "ManifestLine":
        if not self.video_path and not self.audio_path:
            raise ValueError("entry needs at least one of video_path/audio_path")
        if self.duration_s <= 0:
            raise ValueError("duration_s must be positive for an entry with media")
        return self


@dataclass(frozen=True)
class SourceEntry:
    question_id: str
    video_path: Optional[Path]
    audio_path: Optional[Path]
    duration_s: int

    def track(self, modality: Modality) -> Optional[Path]:
        return self.video_path if modality is Modality.VISUAL else self.audio_path


@dataclass(frozen=True)
class SourceManifest:
    entries: Mapping[str, SourceEntry]

    def entry(self, question_id: str) -> SourceEntry:
        try:
            return self.entries[question_id]
        except KeyError:
            raise UnknownQuestionError(question_id)

    def __contains__(self, question_id: str) -> bool:
        return question_id in self.entries

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class SegmentHandle:
    question_id: str
    citation: Citation
    clip_path: Path
    content_digest: str
    extracted_span: TimeSpan

    def as_attachment(self) -> MediaAttachment:
        return MediaAttachment(self.clip_path, self.citation.modality.value,
                               format_citation(self.citation), self.content_digest)


def load_manifest(path: Union[str, Path]) -> SourceManifest:
    """Read a JSON Lines manifest; relative media paths resolve against its folder."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"Manifest file not found: {path}")
    entries: Dict[str, SourceEntry] = {}
    with path.open("r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = ManifestLine.model_validate(json.loads(line))
            except (json.JSONDecodeError, ValidationError) as e:
                raise ManifestError(f"{path}:{line_no}: invalid manifest entry: {e}") from e
            if row.question_id in entries:
                raise ManifestError(f"{path}:{line_no}: duplicate question_id {row.question_id}")

            def resolve(value: Optional[str]) -> Optional[Path]:
                if not value:
                    return None
                media = Path(value)
                return media if media.is_absolute() else (path.parent / media)

            entries[row.question_id] = SourceEntry(row.question_id, resolve(row.video_path),
                                                   resolve(row.audio_path), row.duration_s)
    LOGGER.info("Loaded manifest %s with %d entries", path, len(entries))
    return SourceManifest(entries)


def file_digest(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def effective_span(span: TimeSpan, duration_s: int, padding_s: int = 0) -> Tuple[TimeSpan, bool]:
    """Padded, point-expanded and clamped span; the flag says whether the end overran."""
    start = max(0, span.start_s - padding_s)
    end = span.end_s + padding_s
    if end == start:
        end = start + POINT_WINDOW_S
    clamped = end > duration_s
    end = min(end, duration_s)
    if start >= end:
        start = max(0, end - POINT_WINDOW_S)
    return TimeSpan(start, end), clamped


class MediaStore:
    """Resolves citations to extracted clips.

    ``extractor`` is the ``extractor`` block of the run config: ``command``
    (list with ``{input}``, ``{start}``, ``{end}``, ``{output}``),
    ``video_suffix``, ``audio_suffix``, ``max_parallel`` and ``timeout_s``.
    """

    def __init__(self, manifest: SourceManifest, cache_dir: Optional[Union[str, Path]],
                 extractor: Mapping[str, Any], padding_s: int = 0):
        self.manifest = manifest
        self.clip_dir = (Path(cache_dir) if cache_dir else Path(".attribution_cache")) / "clips"
        self.command: List[str] = list(extractor["command"])
        self.suffixes = {
            Modality.VISUAL: extractor.get("video_suffix", ".mp4"),
            Modality.AUDIO: extractor.get("audio_suffix", ".wav"),
        }
        self.timeout_s = float(extractor.get("timeout_s", 120))
        self.padding_s = padding_s
        self._extract_slots = threading.BoundedSemaphore(int(extractor.get("max_parallel", 2)))
        self._handles: Dict[str, SegmentHandle] = {}
        self._key_locks: Dict[str, threading.Lock] = {}
        self._guard = threading.Lock()
        self._digests: Dict[Tuple[str, int, int], str] = {}
        self.extractions = 0

    def _lock_for(self, key: str) -> threading.Lock:
        with self._guard:
            return self._key_locks.setdefault(key, threading.Lock())

    def _segment_key(self, entry: SourceEntry, source: Path, c: Citation) -> str:
        payload = [entry.question_id, c.modality.value, c.span.start_s, c.span.end_s,
                   self.padding_s, str(source), self.command]
        return hashlib.sha256(json.dumps(payload).encode("utf-8")).hexdigest()

    def resolve_segment(self, question_id: str, c: Citation,
                        warnings: Optional[List[str]] = None) -> SegmentHandle:
        entry = self.manifest.entry(question_id)
        source = entry.track(c.modality)
        if source is None:
            raise ModalityMissingError(question_id, c.modality.value)

        # The clamp warning belongs to every citation that overruns, cached or not.
        span, clamped = effective_span(c.span, entry.duration_s, self.padding_s)
        if clamped:
            message = (f"{question_id}: citation {format_citation(c)} runs past the "
                       f"{entry.duration_s}s source, clamped to {span.start_s}-{span.end_s}s")
            LOGGER.warning(message)
            if warnings is not None:
                warnings.append(message)

        key = self._segment_key(entry, source, c)
        with self._lock_for(key):
            cached = self._handles.get(key)
            if cached is not None:
                return cached
            clip_path = self.clip_dir / key[:2] / f"{key}{self.suffixes[c.modality]}"
            if not clip_path.is_file() or clip_path.stat().st_size == 0:
                self._extract(source, span, clip_path)
            handle = SegmentHandle(question_id, c, clip_path, file_digest(clip_path), span)
            self._handles[key] = handle
            return handle

    def _extract(self, source: Path, span: TimeSpan, clip_path: Path) -> None:
        clip_path.parent.mkdir(parents=True, exist_ok=True)
        partial = clip_path.with_name(f".part-{os.getpid()}-{threading.get_ident()}{clip_path.suffix}")
        fields = {"input": str(source), "start": str(span.start_s), "end": str(span.end_s),
                  "output": str(partial)}
        command = [part.format(**fields) for part in self.command]
        process: Optional[subprocess.Popen] = None
        with self._extract_slots:
            LOGGER.debug("Extracting %s [%d-%d] -> %s", source, span.start_s, span.end_s, clip_path.name)
            try:
                process = subprocess.Popen(command, stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
                _, stderr = process.communicate(timeout=self.timeout_s)
            except FileNotFoundError as e:
                raise ExtractorError(command, None, f"extractor not found: {e}") from e
            except subprocess.TimeoutExpired:
                raise ExtractorError(command, None, f"timed out after {self.timeout_s:g}s")
            finally:
                if process and process.poll() is None:
                    process.terminate()
                    try:
                        process.wait(timeout=5)
                    except subprocess.TimeoutExpired:
                        process.kill()
        try:
            if process.returncode != 0:
                raise ExtractorError(command, process.returncode, stderr or "")
            if not partial.is_file() or partial.stat().st_size == 0:
                raise ExtractorError(command, process.returncode, "extractor produced an empty clip")
            os.replace(partial, clip_path)
        finally:
            partial.unlink(missing_ok=True)
        with self._guard:
            self.extractions += 1

    def source_attachments(self, question_id: str,
                           modalities: Sequence[Modality] = (Modality.VISUAL, Modality.AUDIO)
                           ) -> List[MediaAttachment]:
        """Whole-source attachments for generation calls (no extraction)."""
        entry = self.manifest.entry(question_id)
        attachments = []
        seen = set()
        for modality in modalities:
            source = entry.track(modality)
            if source is None or source in seen:
                continue
            seen.add(source)
            attachments.append(MediaAttachment(source, modality.value,
                                               f"{modality.value} source", self._source_digest(source)))
        return attachments

    def _source_digest(self, source: Path) -> str:
        try:
            stat = source.stat()
        except OSError:
            # Unreadable sources still need a stable key for caching.
            return hashlib.sha256(str(source).encode("utf-8")).hexdigest()
        slot = (str(source), stat.st_size, int(stat.st_mtime))
        with self._guard:
            if slot in self._digests:
                return self._digests[slot]
        value = file_digest(source)
        with self._guard:
            self._digests[slot] = value
        return value

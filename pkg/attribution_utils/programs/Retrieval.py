"""Event localization backends behind ``find_event``."""

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from typing import Any, List, Mapping, Optional, Protocol, Sequence, Tuple

from ..core.Citations import Citation, Modality, TimeSpan, format_citation, parse_timestamp
from ..core.Errors import AttributionError, CitationParseError, ConfigError, ModalityMissingError
from ..core.JudgeGateway import JudgeConfig, JudgeGateway
from ..core.MediaStore import MediaStore

LOGGER = logging.getLogger(__name__)

RETRIEVAL_MODES = ("windowed", "listing")
LISTING_NUDGE = 'Return only a JSON list of timestamp strings such as ["00:03", "00:19-00:21"].'

_LIST_RE = re.compile(r"\[[^\[\]]*\]", re.DOTALL)


class RetrievalBackend(Protocol):
    def find(self, question_id: str, query: str, modality: Modality,
             warnings: Optional[List[str]] = None) -> List[TimeSpan]:
        ...


def merge_spans(spans: Sequence[TimeSpan]) -> List[TimeSpan]:
    """Sort and merge spans that overlap or touch."""
    merged: List[TimeSpan] = []
    for span in sorted(spans):
        if merged and span.start_s <= merged[-1].end_s:
            last = merged[-1]
            merged[-1] = TimeSpan(last.start_s, max(last.end_s, span.end_s))
        else:
            merged.append(span)
    return merged


def sliding_windows(duration_s: int, window_s: int, stride_s: int) -> List[TimeSpan]:
    """Windows from 0 that stop once one reaches the end of the source."""
    if window_s <= 0 or stride_s <= 0:
        raise ConfigError(f"Retrieval window and stride must be positive, got {window_s}/{stride_s}")
    windows = []
    start = 0
    while start < duration_s:
        end = min(start + window_s, duration_s)
        windows.append(TimeSpan(start, end))
        if end >= duration_s:
            break
        start += stride_s
    return windows


def _note(warnings: Optional[List[str]], message: str) -> None:
    LOGGER.warning(message)
    if warnings is not None:
        warnings.append(message)


def _require_track(media: MediaStore, question_id: str, modality: Modality) -> int:
    entry = media.manifest.entry(question_id)
    if entry.track(modality) is None:
        raise ModalityMissingError(question_id, modality.value)
    return entry.duration_s


class WindowedRetriever:
    """Asks the retrieval judge, window by window, whether the event occurs."""

    def __init__(self, gateway: JudgeGateway, media: MediaStore, cfg: JudgeConfig,
                 window_s: int = 10, stride_s: int = 5, width: int = 1):
        self.gateway = gateway
        self.media = media
        self.cfg = cfg
        self.window_s = int(window_s)
        self.stride_s = int(stride_s)
        self.width = max(1, width)
        if self.window_s <= 0 or self.stride_s <= 0:
            raise ConfigError(f"Retrieval window and stride must be positive, got {window_s}/{stride_s}")

    def _probe(self, question_id: str, query: str, modality: Modality,
               window: TimeSpan) -> Tuple[bool, List[str]]:
        notes: List[str] = []
        c = Citation(modality, window)
        try:
            handle = self.media.resolve_segment(question_id, c, notes)
            prompt = self.gateway.render("find_window", modality=modality.value,
                                         segment=format_citation(c), query=query)
            matched = self.gateway.verdict("find", prompt, self.cfg, [handle.as_attachment()]).label
        except AttributionError as e:
            notes.append(f"{question_id}: find window {format_citation(c)} failed ({e}); treated as no match")
            matched = False
        return matched, notes

    def find(self, question_id: str, query: str, modality: Modality,
             warnings: Optional[List[str]] = None) -> List[TimeSpan]:
        duration_s = _require_track(self.media, question_id, modality)
        windows = sliding_windows(duration_s, self.window_s, self.stride_s)
        with ThreadPoolExecutor(max_workers=self.width) as pool:
            probes = list(pool.map(lambda w: self._probe(question_id, query, modality, w), windows))
        for _, notes in probes:
            for message in notes:
                _note(warnings, message)
        hits = merge_spans([w for w, (matched, _) in zip(windows, probes) if matched])
        LOGGER.debug("%s: '%s' (%s) matched %d of %d windows", question_id, query, modality.value,
                     sum(m for m, _ in probes), len(windows))
        return hits


def parse_timestamp_list(raw: str, duration_s: int, warnings: Optional[List[str]] = None) -> List[TimeSpan]:
    """JSON list of timestamp strings; point hits widen to one second."""
    cleaned = raw.strip()
    match = _LIST_RE.search(cleaned)
    if not match:
        raise ValueError("No JSON list in retrieval output")
    items = json.loads(match.group(0))
    spans = []
    for item in items:
        try:
            span = parse_timestamp(str(item))
        except CitationParseError as e:
            _note(warnings, f"Ignoring retrieval hit {item!r}: {e}")
            continue
        if span.start_s >= duration_s:
            _note(warnings, f"Ignoring retrieval hit {item!r} past the {duration_s}s source")
            continue
        end = span.start_s + 1 if span.is_point else span.end_s
        spans.append(TimeSpan(span.start_s, min(end, duration_s)))
    return sorted(set(spans))


class ListingRetriever:
    """One call over the whole track that lists every moment the event occurs."""

    def __init__(self, gateway: JudgeGateway, media: MediaStore, cfg: JudgeConfig):
        self.gateway = gateway
        self.media = media
        self.cfg = cfg

    def find(self, question_id: str, query: str, modality: Modality,
             warnings: Optional[List[str]] = None) -> List[TimeSpan]:
        duration_s = _require_track(self.media, question_id, modality)
        attachments = self.media.source_attachments(question_id, [modality])
        prompt = self.gateway.render("find_listing", modality=modality.value, duration_s=duration_s, query=query)
        try:
            raw = self.gateway.complete("find", prompt, self.cfg, attachments)
            try:
                return parse_timestamp_list(raw, duration_s, warnings)
            except (ValueError, json.JSONDecodeError):
                LOGGER.debug("Unparseable retrieval listing, retrying with nudge")
            raw = self.gateway.complete("find", f"{prompt}\n\n{LISTING_NUDGE}", self.cfg, attachments)
            return parse_timestamp_list(raw, duration_s, warnings)
        except (AttributionError, ValueError) as e:
            _note(warnings, f"{question_id}: retrieval for '{query}' failed ({e}); treated as no match")
            return []


def build_retriever(settings: Mapping[str, Any], gateway: JudgeGateway, media: MediaStore,
                    cfg: JudgeConfig, width: int = 1) -> RetrievalBackend:
    mode = settings.get("mode", "windowed")
    if mode == "windowed":
        return WindowedRetriever(gateway, media, cfg, settings.get("window_s", 10), settings.get("stride_s", 5), width)
    if mode == "listing":
        return ListingRetriever(gateway, media, cfg)
    raise ConfigError(f"Unknown retrieval mode {mode!r} (expected one of {', '.join(RETRIEVAL_MODES)})")

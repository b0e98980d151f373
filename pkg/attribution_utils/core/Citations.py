"""Citation domain types and every text parser that touches model output.

Citations look like ``(audio, 0:42-0:46)`` or ``[visual, 1:05]`` and may group
several entries with semicolons: ``(visual, 0:12; audio, 0:12-0:14)``.
A group binds to the sentence it trails.
"""

import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

from .Errors import CitationParseError

LOGGER = logging.getLogger(__name__)


class Modality(str, Enum):
    VISUAL = "visual"
    AUDIO = "audio"

    @classmethod
    def parse(cls, token: str) -> "Modality":
        value = token.strip().lower()
        for modality in cls:
            if modality.value == value:
                return modality
        raise CitationParseError(token, "Unknown modality")


@dataclass(frozen=True, order=True)
class TimeSpan:
    start_s: int
    end_s: int

    def __post_init__(self):
        if self.start_s < 0 or self.end_s < 0:
            raise ValueError(f"TimeSpan bounds must be non-negative: {self.start_s}-{self.end_s}")
        if self.start_s > self.end_s:
            raise ValueError(f"TimeSpan start after end: {self.start_s}-{self.end_s}")

    @property
    def is_point(self) -> bool:
        return self.start_s == self.end_s

    @property
    def duration_s(self) -> int:
        return self.end_s - self.start_s


@dataclass(frozen=True)
class Citation:
    modality: Modality
    span: TimeSpan

    def to_dict(self) -> Dict[str, Any]:
        return {"modality": self.modality.value, "start_s": self.span.start_s, "end_s": self.span.end_s}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Citation":
        return cls(Modality.parse(data["modality"]), TimeSpan(int(data["start_s"]), int(data["end_s"])))

    def __str__(self) -> str:
        return format_citation(self)


@dataclass(frozen=True)
class Sentence:
    index: int
    text: str
    raw_text: str
    citations: Tuple[Citation, ...] = ()

    @property
    def cited(self) -> bool:
        return bool(self.citations)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "index": self.index,
            "text": self.text,
            "raw_text": self.raw_text,
            "citations": [c.to_dict() for c in self.citations],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Sentence":
        return cls(
            index=int(data["index"]),
            text=data["text"],
            raw_text=data.get("raw_text", data["text"]),
            citations=tuple(Citation.from_dict(c) for c in data.get("citations", [])),
        )


@dataclass(frozen=True)
class Response:
    question_id: str
    raw: str
    sentences: Tuple[Sentence, ...]
    answer_letter: Optional[str] = None
    reasoning: str = ""
    warnings: Tuple[str, ...] = field(default=(), compare=False)


@dataclass(frozen=True)
class AtomicFact:
    text: str
    parent_index: int
    citations: Tuple[Citation, ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "text": self.text,
            "parent_index": self.parent_index,
            "citations": [c.to_dict() for c in self.citations],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AtomicFact":
        return cls(
            text=data["text"],
            parent_index=int(data["parent_index"]),
            citations=tuple(Citation.from_dict(c) for c in data.get("citations", [])),
        )


# --- timestamps -----------------------------------------------------------

_CLOCK = r"\d+:\d{2}(?::\d{2})?"
_TIMESTAMP_RE = re.compile(rf"^\s*({_CLOCK})\s*(?:[-–—]\s*({_CLOCK}))?\s*$")
_CLOCK_TOKEN_RE = re.compile(r"\d+:\d{2}")


def _clock_seconds(token: str) -> int:
    parts = [int(p) for p in token.split(":")]
    if len(parts) == 3:
        hours, minutes, seconds = parts
        if minutes >= 60:
            raise CitationParseError(token, "Minutes field must be below 60")
    else:
        hours, (minutes, seconds) = 0, parts
    if seconds >= 60:
        raise CitationParseError(token, "Seconds field must be below 60")
    return hours * 3600 + minutes * 60 + seconds


def parse_timestamp(text: str) -> TimeSpan:
    """Parse ``M:SS``, ``MM:SS``, ``H:MM:SS`` or a ``A-B`` range of those."""
    match = _TIMESTAMP_RE.match(text)
    if not match:
        raise CitationParseError(text, "Malformed timestamp")
    start = _clock_seconds(match.group(1))
    end = _clock_seconds(match.group(2)) if match.group(2) else start
    if start > end:
        raise CitationParseError(text, "Reversed timestamp range")
    return TimeSpan(start, end)


def format_timestamp(seconds: int) -> str:
    return f"{seconds // 60}:{seconds % 60:02d}"


def format_citation(c: Citation) -> str:
    """Canonical ``(modality, M:SS)`` / ``(modality, M:SS-M:SS)`` text."""
    return f"({_citation_entry(c)})"


def format_citation_group(citations: Sequence[Citation]) -> str:
    return "(" + "; ".join(_citation_entry(c) for c in citations) + ")" if citations else ""


def _citation_entry(c: Citation) -> str:
    stamp = format_timestamp(c.span.start_s)
    if not c.span.is_point:
        stamp += f"-{format_timestamp(c.span.end_s)}"
    return f"{c.modality.value}, {stamp}"


# --- citation groups -----------------------------------------------------

_GROUP_DELIMS = {"(": ")", "[": "]"}
_CANDIDATE_RE = re.compile(r"\(([^()\[\]]*)\)|\[([^()\[\]]*)\]")
_MODALITY_LEAD_RE = re.compile(r"^\s*(?:visual|audio|video|vision|image|frame|sound|speech)\s*,", re.IGNORECASE)


def parse_citation_group(text: str) -> List[Citation]:
    """Parse one ``(...)`` or ``[...]`` group into its citations, in order."""
    stripped = text.strip()
    if len(stripped) < 2 or _GROUP_DELIMS.get(stripped[0]) != stripped[-1]:
        raise CitationParseError(text, "Citation group must be wrapped in () or []")
    inner = stripped[1:-1].strip()
    if not inner:
        raise CitationParseError(text, "Empty citation group")

    citations = []
    for entry in inner.split(";"):
        entry = entry.strip()
        if not entry:
            raise CitationParseError(text, "Empty citation entry")
        if "," not in entry:
            raise CitationParseError(entry, "Missing comma between modality and timestamp")
        modality_token, stamp = entry.split(",", 1)
        citations.append(Citation(Modality.parse(modality_token), parse_timestamp(stamp)))
    return citations


def _looks_like_citation(inner: str) -> bool:
    return bool(_CLOCK_TOKEN_RE.search(inner) or _MODALITY_LEAD_RE.match(inner))


def scan_citation_groups(text: str) -> List[Tuple[int, int, Optional[List[Citation]], Optional[str]]]:
    """Find citation-like groups as ``(start, end, citations, error)`` tuples.

    Well-formed groups carry their citations and ``error=None``; malformed ones
    carry ``citations=None`` and the parse error message.
    """
    found = []
    for match in _CANDIDATE_RE.finditer(text):
        inner = match.group(1) if match.group(1) is not None else match.group(2)
        if not _looks_like_citation(inner):
            continue
        try:
            found.append((match.start(), match.end(), parse_citation_group(match.group(0)), None))
        except CitationParseError as exc:
            found.append((match.start(), match.end(), None, str(exc)))
    return found


def contains_citation_syntax(text: str) -> bool:
    return any(citations is not None for _, _, citations, _ in scan_citation_groups(text))


def _normalize_spacing(text: str) -> str:
    text = re.sub(r"\s+", " ", text)
    text = re.sub(r"\s+([.,;:!?])", r"\1", text)
    return text.strip()


def dedupe_citations(citations: Sequence[Citation]) -> Tuple[Citation, ...]:
    seen = set()
    unique = []
    for c in citations:
        if c not in seen:
            seen.add(c)
            unique.append(c)
    return tuple(unique)


def extract_citations(sentence_text: str, warnings: Optional[List[str]] = None
                      ) -> Tuple[str, List[Citation]]:
    """Strip well-formed citation groups from one sentence.

    Malformed groups stay in the text and are reported through ``warnings``.
    """
    pieces = []
    citations: List[Citation] = []
    cursor = 0
    for start, end, group, error in scan_citation_groups(sentence_text):
        if group is None:
            message = f"Malformed citation left in text: {sentence_text[start:end]} ({error})"
            LOGGER.warning(message)
            if warnings is not None:
                warnings.append(message)
            continue
        pieces.append(sentence_text[cursor:start])
        cursor = end
        citations.extend(group)
    pieces.append(sentence_text[cursor:])
    return _normalize_spacing("".join(pieces)), list(dedupe_citations(citations))


def strip_citations(text: str) -> str:
    return extract_citations(text)[0]


# --- sentence segmentation -----------------------------------------------

TITLE_ABBREVIATIONS = frozenset({
    "mr", "mrs", "ms", "dr", "prof", "st", "jr", "sr", "vs", "etc", "e.g", "i.e",
    "approx", "no", "fig", "figs", "eq", "vol", "mt", "cf", "al",
})
_OPTION_WORDS = frozenset({"option", "options", "choice", "answer", "is", "be"})
_TERMINALS = ".!?"
_CLOSERS = "\"'”’)]"
_OPENERS = "\"'“‘"
MAX_GROUP_CHARS = 160


def _word_before(text: str, pos: int) -> str:
    """Return the token immediately preceding ``text[pos]`` (the terminal)."""
    start = pos
    while start > 0 and not text[start - 1].isspace():
        start -= 1
    return text[start:pos]


def _previous_word(text: str, token_start: int) -> str:
    end = token_start
    while end > 0 and text[end - 1].isspace():
        end -= 1
    return _word_before(text, end).lower().strip("\"'(")


def _is_protected(text: str, pos: int) -> bool:
    if text[pos] != ".":
        return False
    token = _word_before(text, pos).lstrip("\"'(“")
    lowered = token.lower()
    if lowered in TITLE_ABBREVIATIONS:
        return True
    if len(token) == 1 and token.isalpha():
        # "option A." ends a sentence; "J. Smith" does not.
        token_start = pos - len(_word_before(text, pos))
        return _previous_word(text, token_start) not in _OPTION_WORDS
    if token.isdigit():
        line_start = text.rfind("\n", 0, pos) + 1
        if not text[line_start:pos - len(token)].strip():
            return True  # list marker such as "1."
    return False


def _boundaries(text: str) -> List[int]:
    """Offsets where a new sentence starts."""
    cuts = []
    depth = 0
    opened_at = 0
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if depth and i - opened_at > MAX_GROUP_CHARS:
            depth = 0  # unbalanced bracket in prose
        if ch in "([":
            if not depth:
                opened_at = i
            depth += 1
        elif ch in ")]":
            depth = max(0, depth - 1)
        elif ch == "\n" and depth == 0:
            j = i + 1
            while j < n and text[j] in " \t\r":
                j += 1
            if j < n and text[j] == "\n":
                while j < n and text[j].isspace():
                    j += 1
                if j < n:
                    cuts.append(j)
                i = j
                continue
        elif ch in _TERMINALS and depth == 0 and not _is_protected(text, i):
            j = i + 1
            while j < n and (text[j] in _TERMINALS or text[j] in "\"'”’"):
                j += 1
            k = j
            while k < n and text[k] in " \t\r\n":
                k += 1
            if k > j and k < n and (text[k].isupper() or text[k].isdigit() or text[k] in _OPENERS):
                cuts.append(k)
                i = k
                continue
        i += 1
    return cuts


def segment_sentences(reasoning_text: str, warnings: Optional[List[str]] = None) -> List[Sentence]:
    """Deterministic rule-based split of a reasoning block into Sentences."""
    if not reasoning_text or not reasoning_text.strip():
        return []
    starts = [0] + _boundaries(reasoning_text)
    ends = starts[1:] + [len(reasoning_text)]
    sentences = []
    for start, end in zip(starts, ends):
        raw = reasoning_text[start:end].strip()
        if not raw:
            continue
        text, citations = extract_citations(raw, warnings)
        if not text:
            # A lone citation group after a boundary still belongs to the previous sentence.
            if sentences and citations:
                previous = sentences[-1]
                sentences[-1] = Sentence(previous.index, previous.text, f"{previous.raw_text} {raw}",
                                         dedupe_citations(previous.citations + tuple(citations)))
            continue
        sentences.append(Sentence(len(sentences), text, raw, tuple(citations)))
    return sentences


# --- full response -------------------------------------------------------

_REASONING_MARK_RE = re.compile(r"\**\s*reasoning\s*\**\s*:\s*\**", re.IGNORECASE)
_ANSWER_MARK_RE = re.compile(r"\**\s*(?:final\s+)?answer\s*\**\s*:\s*\**", re.IGNORECASE)
_LEADING_LETTER_RE = re.compile(r"^[\s\*\(\[\"']*([A-Ea-e])(?![A-Za-z])")
_STANDALONE_LETTER_RE = re.compile(r"(?<![A-Za-z])([A-E])(?![A-Za-z])")


def split_reasoning_and_answer(raw: str) -> Tuple[str, Optional[str]]:
    """Return the reasoning block and the text following the answer marker."""
    reasoning_match = _REASONING_MARK_RE.search(raw)
    body = raw[reasoning_match.end():] if reasoning_match else raw
    answer_matches = list(_ANSWER_MARK_RE.finditer(body))
    if not answer_matches:
        return body.strip(), None
    last = answer_matches[-1]
    return body[:last.start()].strip(), body[last.end():]


def parse_answer_letter(answer_text: Optional[str]) -> Optional[str]:
    if answer_text is None:
        return None
    leading = _LEADING_LETTER_RE.match(answer_text)
    if leading:
        return leading.group(1).upper()
    standalone = _STANDALONE_LETTER_RE.search(answer_text)
    return standalone.group(1) if standalone else None


def parse_response(raw: str, question_id: str) -> Response:
    warnings: List[str] = []
    reasoning, answer_text = split_reasoning_and_answer(raw or "")
    answer_letter = parse_answer_letter(answer_text)
    if answer_text is None:
        warnings.append(f"{question_id}: no answer marker found")
    sentences = segment_sentences(reasoning, warnings)
    return Response(
        question_id=str(question_id),
        raw=raw or "",
        sentences=tuple(sentences),
        answer_letter=answer_letter,
        reasoning=reasoning,
        warnings=tuple(warnings),
    )


def reasoning_text(sentences: Sequence[Sentence]) -> str:
    """Rebuild a reasoning block from its sentences (whitespace-normalized)."""
    return " ".join(s.raw_text for s in sentences)

from typing import List, Optional, Sequence


class AttributionError(Exception):
    """Base class for every error raised by attribution_utils."""


class ConfigError(AttributionError):
    pass


class CitationParseError(AttributionError):
    def __init__(self, token: str, message: str):
        self.token = token
        super().__init__(f"{message}: {token!r}")


class ManifestError(AttributionError):
    pass


class UnknownQuestionError(ManifestError):
    def __init__(self, question_id: str):
        self.question_id = question_id
        super().__init__(f"Question id not in manifest: {question_id}")


class SegmentError(AttributionError):
    pass


class ModalityMissingError(SegmentError):
    """The manifest has no track for the cited modality."""

    def __init__(self, question_id: str, modality: str):
        self.question_id = question_id
        self.modality = modality
        super().__init__(f"modality-missing: {question_id} has no {modality} track")


class ExtractorError(SegmentError):
    def __init__(self, command: Sequence[str], returncode: Optional[int], stderr: str = ""):
        self.command = list(command)
        self.returncode = returncode
        self.stderr = stderr
        super().__init__(f"Extractor failed (exit {returncode}): {stderr.strip()[:300]}")


class JudgeError(AttributionError):
    pass


class TransientBackendError(JudgeError):
    """Raised by backends for failures worth retrying (rate limits, timeouts)."""


class BackendError(JudgeError):
    def __init__(self, attempts: int, cause: Optional[BaseException] = None):
        self.attempts = attempts
        self.cause = cause
        super().__init__(f"Judge backend failed after {attempts} attempt(s): {cause}")


class VerdictParseError(JudgeError):
    def __init__(self, raw: str, message: str = "Unparseable judge output"):
        self.raw = raw
        super().__init__(f"{message}: {raw[:200]!r}")


class ProgramParseError(AttributionError):
    def __init__(self, message: str, line: int = 0, column: int = 0):
        self.line = line
        self.column = column
        super().__init__(f"{message} (line {line}, column {column})")


class ProgramExecutionError(AttributionError):
    pass


class MetaEvalError(AttributionError):
    def __init__(self, message: str, orphans: Optional[List[str]] = None):
        self.orphans = list(orphans or [])
        super().__init__(message)

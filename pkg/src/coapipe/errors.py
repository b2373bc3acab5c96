"""Exception hierarchy shared across the pipeline.

Every error raised on purpose by this package derives from PipelineError,
so callers can catch one type at stage boundaries. Validation-style errors
(bad input data, bad config) and runtime-style errors (transport, IO) are
kept as distinct subtrees because the CLI maps them to different exit codes.
"""

from __future__ import annotations


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(PipelineError):
    """Input data or configuration violates a documented contract."""


class RuntimeStageError(PipelineError):
    """A stage failed at runtime (network, IO, exhausted mocks)."""


# -- corpus ----------------------------------------------------------------

class UnknownLabelError(ValidationError):
    def __init__(self, label: str, where: str = ""):
        self.label = label
        self.where = where
        suffix = f" ({where})" if where else ""
        super().__init__(f"unknown label {label!r}{suffix}")


class EmptyTextError(ValidationError):
    pass


class DuplicateIdError(ValidationError):
    pass


class MalformedRecordError(ValidationError):
    def __init__(self, line_number: int, reason: str):
        self.line_number = line_number
        super().__init__(f"malformed record at line {line_number}: {reason}")


class InsufficientSamplesError(ValidationError):
    def __init__(self, category: str, have: int, need: int):
        self.category = category
        self.have = have
        self.need = need
        super().__init__(
            f"category {category!r} has {have} samples, needs {need}"
        )


# -- embeddings / retrieval ------------------------------------------------

class MissingEmbeddingError(ValidationError):
    def __init__(self, sample_id: str):
        self.sample_id = sample_id
        super().__init__(f"no embedding for sample id {sample_id!r}")


class DimensionMismatchError(ValidationError):
    pass


class ZeroVectorError(ValidationError):
    pass


class NonFiniteEntryError(ValidationError):
    pass


class EmptyIndexError(ValidationError):
    pass


# -- gateway ---------------------------------------------------------------

class TransportError(RuntimeStageError):
    """Connection-level failure. Retryable."""


class RetryableStatusError(TransportError):
    """HTTP status in the retryable class (429 or 5xx)."""

    def __init__(self, status: int, body_excerpt: str = ""):
        self.status = status
        self.body_excerpt = body_excerpt
        super().__init__(f"retryable status {status}: {body_excerpt[:200]}")


class BadStatusError(RuntimeStageError):
    """Non-retryable HTTP status. Carries a body excerpt for audit."""

    def __init__(self, status: int, body_excerpt: str = ""):
        self.status = status
        self.body_excerpt = body_excerpt
        super().__init__(f"bad status {status}: {body_excerpt[:200]}")


class RequestTimeoutError(TransportError):
    pass


class MockScriptExhausted(RuntimeStageError):
    pass


class CountMismatchError(RuntimeStageError):
    """Server returned a different number of items than requested."""


# -- chain parsing ---------------------------------------------------------

class MalformedChainError(ValidationError):
    def __init__(self, missing_section: str, raw_text: str = ""):
        self.missing_section = missing_section
        self.raw_text = raw_text
        super().__init__(f"missing section {missing_section!r}")


class AmbiguousLabelError(ValidationError):
    def __init__(self, candidates: list[str], raw: str = ""):
        self.candidates = candidates
        self.raw = raw
        super().__init__(
            f"classification text matches several categories equally: {candidates}"
        )


# -- kernel ----------------------------------------------------------------

class TokenOutOfRangeError(ValidationError):
    pass


class NonFiniteInputError(ValidationError):
    pass


# -- metrics ---------------------------------------------------------------

class LengthMismatchError(ValidationError):
    pass


class EmptyInputError(ValidationError):
    pass


# -- export / config -------------------------------------------------------

class IoError(RuntimeStageError):
    pass


class InvariantViolationError(PipelineError):
    pass


class ConfigInvalidError(ValidationError):
    def __init__(self, field: str, reason: str):
        self.field = field
        self.reason = reason
        super().__init__(f"config field {field!r}: {reason}")

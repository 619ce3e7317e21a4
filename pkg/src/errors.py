"""
Error types for the synthrank pipeline.

Every failure the pipeline can raise derives from SynthRankError so the CLI can
map it to an exit code in one place.
"""

from typing import Any, Dict, Optional

EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_BACKEND_ERROR = 3
EXIT_STAGE_FAILURE = 4


class SynthRankError(Exception):
    """Base class for all pipeline errors."""

    exit_code = EXIT_STAGE_FAILURE


class ConfigurationError(SynthRankError):
    """Invalid configuration, unknown registry entry or unusable output directory."""

    exit_code = EXIT_CONFIG_ERROR


class ArgumentError(SynthRankError, ValueError):
    """An operation was called with arguments violating its preconditions."""


class IngestionError(SynthRankError):
    """Corpus records could not be ingested."""

    def __init__(self, message: str, doc_id: Optional[str] = None, line_number: Optional[int] = None):
        super().__init__(message)
        self.doc_id = doc_id
        self.line_number = line_number


class TemplateError(SynthRankError):
    """A prompt template could not be rendered."""

    exit_code = EXIT_CONFIG_ERROR

    def __init__(self, message: str, placeholder: Optional[str] = None):
        super().__init__(message)
        self.placeholder = placeholder


class GatewayError(SynthRankError):
    """A remote LLM call failed after retries."""

    exit_code = EXIT_BACKEND_ERROR

    def __init__(self, message: str, retryable: bool = True, status_code: Optional[int] = None):
        super().__init__(message)
        self.retryable = retryable
        self.status_code = status_code


class GenerationError(SynthRankError):
    """The backend produced an empty or unusable generation."""

    exit_code = EXIT_BACKEND_ERROR


class CapabilityError(SynthRankError):
    """The backend cannot report label-restricted logits."""

    exit_code = EXIT_BACKEND_ERROR


class BatchError(SynthRankError):
    """Every item of a batch failed."""

    exit_code = EXIT_BACKEND_ERROR

    def __init__(self, message: str, failures: Optional[list] = None):
        super().__init__(message)
        self.failures = failures or []


class StateError(SynthRankError):
    """An object is not in a state that allows the requested operation."""


class BuildError(SynthRankError):
    """Building an index failed for a specific document."""

    def __init__(self, message: str, doc_id: Optional[str] = None):
        super().__init__(message)
        self.doc_id = doc_id


class GroupError(SynthRankError):
    """A training group could not be built from a triplet."""


class TrainingError(SynthRankError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class StageError(SynthRankError):
    """A pipeline stage failed; partial artifacts are kept for resume."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"Stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        backend_errors = (GatewayError, GenerationError, CapabilityError, BatchError)
        if isinstance(cause, backend_errors):
            self.exit_code = EXIT_BACKEND_ERROR
        elif isinstance(cause, (ConfigurationError, TemplateError)):
            self.exit_code = EXIT_CONFIG_ERROR
        else:
            self.exit_code = EXIT_STAGE_FAILURE

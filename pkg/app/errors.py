"""
ConfProbe Error Handling

Structured error categories and codes for confidence estimation runs.
Covers: bad configuration, dataset ingestion, oracle queries, query budgets,
numeric domain violations, undefined metrics and missing white-box access.
"""

from enum import Enum
from typing import Optional, Dict


class ErrorCategory(Enum):
    """High-level error categories"""
    CONFIG = "config"            # Invalid run configuration or transform spec
    INGESTION = "ingestion"      # Dataset files missing or malformed
    ORACLE = "oracle"            # Query transport, status, playback misses
    BUDGET = "budget"            # Planned queries exceed the cap
    DOMAIN = "domain"            # Probability outside a function's domain
    METRIC = "metric"            # Metric undefined for the given data
    CAPABILITY = "capability"    # White-box operation on a black-box oracle
    UNKNOWN = "unknown"


class ErrorCode(Enum):
    """Specific error codes for granular tracking"""
    # Config errors (1xx)
    INVALID_VALUE = 101
    INVALID_TRANSFORM = 102
    SHAPE_MISMATCH = 103
    EMPTY_SPLIT = 104
    MISSING_INPUT = 105

    # Ingestion errors (2xx)
    FILE_MISSING = 201
    MALFORMED_CSV = 202
    BAD_TENSOR = 203
    LABEL_OUT_OF_RANGE = 204
    SHAPE_INCONSISTENT = 205

    # Oracle errors (3xx)
    QUERY_FAILED = 301
    QUERY_STATUS = 302
    BAD_RESPONSE = 303
    MISSING_PREDICTION = 304

    # Budget errors (4xx)
    BUDGET_EXCEEDED = 401

    # Domain errors (5xx)
    OUT_OF_DOMAIN = 501
    TOO_FEW_SAMPLES = 502

    # Metric errors (6xx)
    EMPTY_INPUT = 601
    DEGENERATE = 602

    # Capability errors (7xx)
    NOT_WHITE_BOX = 701

    # Unknown (9xx)
    UNKNOWN = 999


# Process exit codes per category; anything unlisted exits with 1
EXIT_CODES = {
    ErrorCategory.CONFIG: 2,
    ErrorCategory.INGESTION: 3,
    ErrorCategory.ORACLE: 4,
    ErrorCategory.BUDGET: 5,
}


class ProbeError(Exception):
    """Base error carrying category, code and an actionable suggestion"""

    category = ErrorCategory.UNKNOWN
    default_code = ErrorCode.UNKNOWN

    def __init__(
        self,
        message: str,
        code: Optional[ErrorCode] = None,
        details: Optional[str] = None,
        recoverable: bool = False,
        suggestion: Optional[str] = None
    ):
        super().__init__(message)
        self.message = message
        self.code = code or self.default_code
        self.details = details
        self.recoverable = recoverable
        self.suggestion = suggestion if suggestion is not None else _get_suggestion(self.code)

    def to_dict(self) -> Dict:
        return {
            'category': self.category.value,
            'code': self.code.value,
            'message': self.message,
            'details': self.details,
            'recoverable': self.recoverable,
            'suggestion': self.suggestion
        }


class ConfigError(ProbeError):
    category = ErrorCategory.CONFIG
    default_code = ErrorCode.INVALID_VALUE


class IngestionError(ProbeError):
    category = ErrorCategory.INGESTION
    default_code = ErrorCode.FILE_MISSING


class OracleError(ProbeError):
    category = ErrorCategory.ORACLE
    default_code = ErrorCode.QUERY_FAILED


class QueryError(OracleError):
    """Transport or status failure; retried a bounded number of times"""

    def __init__(self, message: str, code: Optional[ErrorCode] = None, **kwargs):
        kwargs.setdefault('recoverable', True)
        super().__init__(message, code=code, **kwargs)


class MissingPredictionError(OracleError):
    default_code = ErrorCode.MISSING_PREDICTION


class BudgetError(ProbeError):
    category = ErrorCategory.BUDGET
    default_code = ErrorCode.BUDGET_EXCEEDED


class DomainError(ProbeError, ValueError):
    category = ErrorCategory.DOMAIN
    default_code = ErrorCode.OUT_OF_DOMAIN


class UndefinedMetricError(ProbeError):
    category = ErrorCategory.METRIC
    default_code = ErrorCode.DEGENERATE


class CapabilityError(ProbeError):
    category = ErrorCategory.CAPABILITY
    default_code = ErrorCode.NOT_WHITE_BOX


def exit_code_for(error: Exception) -> int:
    """Map an exception to the process exit code"""
    if isinstance(error, ProbeError):
        return EXIT_CODES.get(error.category, 1)
    return 1


def _get_suggestion(code: ErrorCode) -> Optional[str]:
    """Get actionable suggestion for error code"""
    suggestions = {
        ErrorCode.INVALID_TRANSFORM: "Check transform magnitudes are >= 0 and sigma_e > 0 when alpha > 0",
        ErrorCode.SHAPE_MISMATCH: "Images must match the oracle's declared input shape",
        ErrorCode.EMPTY_SPLIT: "Increase the validation split size m",
        ErrorCode.MISSING_INPUT: "Run the producing command first or pass the file path",
        ErrorCode.FILE_MISSING: "Check the dataset directory contains labels.csv and every listed image",
        ErrorCode.MALFORMED_CSV: "labels.csv rows must be 'filename,label'",
        ErrorCode.BAD_TENSOR: "Raw tensors need the BBCT header followed by H*W*C float32 values",
        ErrorCode.LABEL_OUT_OF_RANGE: "Labels must lie in [0, num_classes)",
        ErrorCode.SHAPE_INCONSISTENT: "All images in a dataset must share one shape",
        ErrorCode.QUERY_FAILED: "Check the endpoint is reachable, or raise max_retries",
        ErrorCode.QUERY_STATUS: "The prediction server rejected the request - check its logs",
        ErrorCode.MISSING_PREDICTION: "The playback log has no answer for this image - record it first",
        ErrorCode.BUDGET_EXCEEDED: "Raise the budget or reduce m, n or S",
        ErrorCode.TOO_FEW_SAMPLES: "Collect more latent noise draws",
        ErrorCode.NOT_WHITE_BOX: "Use a synthetic oracle for white-box diagnostics",
    }
    return suggestions.get(code)


def format_error_message(error: ProbeError) -> str:
    """Format error for display in logs/CLI"""
    msg = f"[{error.category.value.upper()}] {error.message}"
    if error.suggestion:
        msg += f" - {error.suggestion}"
    return msg

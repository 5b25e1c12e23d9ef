"""
Exception hierarchy for hardy-factor
Every error carries a message, JSON-able details and the CLI exit code it maps to
"""

from typing import Any, Dict, Optional


class HardyFactorError(Exception):
    """Base class for all errors raised by the laboratory"""

    exit_code = 1

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        self.message = message
        self.details = details or {}
        super().__init__(self.message)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "error": type(self).__name__,
            "message": self.message,
            "details": self.details,
            "exit_code": self.exit_code,
        }


# ==================== CONFIGURATION (exit 4) ====================

class ConfigError(HardyFactorError):
    """Malformed configuration, bundle or command-line input"""
    exit_code = 4


class ResolutionError(ConfigError):
    """Resolution exceeded, insufficient or mismatched"""


class DimensionMismatchError(ConfigError):
    """Operands live on incompatible bases"""


class DisjointnessError(ConfigError):
    """A collection that must be pairwise disjoint has overlapping intervals"""


class IncompleteFamilyError(ConfigError):
    """A collection family is missing assignments on its domain"""


class IndexConstraintError(ConfigError):
    """Random-variable indices violate the admissibility constraints"""


class EnumerationCapError(ConfigError):
    """Exhaustive sign enumeration would exceed the per-axis cap"""


class InvalidFamilyError(ConfigError):
    """A family failed the Jones or Capon conditions"""

    def __init__(self, message: str, report: Any = None):
        details = {"report": report.model_dump(mode="json")} if report is not None else {}
        super().__init__(message, details)
        self.report = report


# ==================== INFEASIBLE (exit 3) ====================

class InfeasibleError(HardyFactorError):
    exit_code = 3


class DegenerateDiagonalError(InfeasibleError):
    """A diagonal entry needed as a divisor or a sign is zero"""


class GenerationError(InfeasibleError):
    """Requested test-operator parameters cannot be met"""


class FactorizationInfeasibleError(InfeasibleError):
    """The factorization pipeline cannot proceed (singular system, intractable size)"""


class SignsNotFoundError(InfeasibleError):
    """Sign search exhausted its attempts"""

    def __init__(self, message: str, report: Any = None):
        details = {"report": report.model_dump(mode="json")} if report is not None else {}
        super().__init__(message, details)
        self.report = report


# ==================== VERIFICATION (exit 2) ====================

class VerificationError(HardyFactorError):
    """A verifiable claim failed its check"""
    exit_code = 2

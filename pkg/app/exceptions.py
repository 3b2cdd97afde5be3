"""Domain exceptions.

Each error also derives from the closest builtin so callers can catch
either the lab-specific type or the generic one.
"""

from __future__ import annotations

from typing import Iterable


class QuadLabError(Exception):
    """Base class for every error raised by the lab."""


# ── Numerics ──

class DimensionError(QuadLabError, ValueError):
    """Tensor shapes do not agree."""


class NumericalError(QuadLabError, FloatingPointError):
    """A primitive produced NaN or Inf."""


class TargetNormalizationError(QuadLabError, ValueError):
    """A soft target row does not sum to one."""


class AutodiffUsageError(QuadLabError, RuntimeError):
    """The autodiff engine was driven incorrectly (e.g. non-scalar root)."""


# ── Data ──

class VocabularyError(QuadLabError, KeyError):
    """Unknown question word or token id."""

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else "unknown token"


class UnsatisfiableQuestion(QuadLabError, LookupError):
    """The scene admits no unambiguous instance of the requested skill."""


class MemoryUsageError(QuadLabError, ValueError):
    """Replay pairing was called with mismatched lengths."""


class BenchmarkNotFoundError(QuadLabError, FileNotFoundError):
    """No generated benchmark at the expected location."""


class BenchmarkIntegrityError(QuadLabError, ValueError):
    """A benchmark file does not match the hash recorded in its manifest."""


# ── Configuration / evaluation ──

class ConfigError(QuadLabError, ValueError):
    """Invalid experiment or model configuration."""


class EvaluationError(QuadLabError, ValueError):
    """Evaluation was requested on unusable input."""


class IncompleteMatrixError(QuadLabError, ValueError):
    """Accuracy matrix lacks the entries a metric needs."""


class MissingFoldsError(QuadLabError, ValueError):
    """Novel-composition aggregation is missing some folds."""

    def __init__(self, missing: Iterable[int]):
        self.missing = sorted(missing)
        super().__init__(f"Missing novel-composition folds: {self.missing}")

from __future__ import annotations


class BRSTError(Exception):
    """Base class for every error raised by the brst package."""


class ShapeError(BRSTError, ValueError):
    """Operand extents do not agree."""


class ContractError(BRSTError, ValueError):
    """A caller broke an API precondition (e.g. non-scalar loss passed to backward)."""


class EvaluationError(BRSTError, RuntimeError):
    """A function evaluated during a gradient check returned a non-finite value."""


class NumericError(BRSTError, RuntimeError):
    """A forward pass produced NaN or Inf."""

    def __init__(self, message: str, repetition: int | None = None) -> None:
        super().__init__(message)
        self.repetition = repetition


class InputError(BRSTError, ValueError):
    """Bad user input: out-of-range token ids, too-short audio, empty n-best lists, ..."""


class ResampleNotSupportedError(InputError):
    """Audio is not sampled at 16 kHz."""


class DegenerateInputError(InputError):
    """Similarity input without variance."""


class InfeasibleTargetError(BRSTError, ValueError):
    """The CTC target cannot be aligned to the available frames."""


class ConfigError(BRSTError, ValueError):
    """Invalid model, training or corpus configuration."""


class CheckpointError(BRSTError, RuntimeError):
    """A checkpoint is malformed or incompatible with the target model."""

    def __init__(self, message: str, component: str | None = None) -> None:
        super().__init__(message)
        self.component = component


class TrainingAbortedError(BRSTError, RuntimeError):
    """The optimizer hit a non-finite loss."""


class CorpusError(BRSTError, RuntimeError):
    """A manifest entry could not be read."""

    def __init__(self, message: str, utt_id: str | None = None) -> None:
        super().__init__(message)
        self.utt_id = utt_id


__all__ = [
    "BRSTError",
    "ShapeError",
    "ContractError",
    "EvaluationError",
    "NumericError",
    "InputError",
    "ResampleNotSupportedError",
    "DegenerateInputError",
    "InfeasibleTargetError",
    "ConfigError",
    "CheckpointError",
    "TrainingAbortedError",
    "CorpusError",
]

"""Exception types shared across the tuner pipeline."""


class TunerError(Exception):
    """Base class for all tool-specific errors."""


class ParseError(TunerError):
    """Source text contains a construct outside the supported C subset."""

    def __init__(self, message: str, line: int = 0, column: int = 0, file_id: str = ""):
        self.line = line
        self.column = column
        self.file_id = file_id
        where = f"{file_id or '<source>'}:{line}:{column}"
        super().__init__(f"{where}: {message}")


class ProbeUnavailable(TunerError):
    """The compile probe cannot run at all (missing command, unwritable temp dir)."""


class GenomeLengthMismatch(TunerError):
    """Genome length does not match the eligible-loop count."""


class ZeroGeneLength(TunerError):
    """No eligible loops: the offload search space is empty."""


class LengthMismatch(TunerError):
    """Crossover parents have different genome lengths."""


class FitnessDomainError(TunerError):
    """Fitness requested for a non-positive time."""


class PlanInconsistent(TunerError):
    """Transfer plan disagrees with the genome or loop table it was built for."""


class EmitError(TunerError):
    """Annotated variant cannot be produced (unknown array extent, odd layout)."""


class ModelIncomplete(TunerError):
    """Cost model is missing an entry for a loop or variable the plan needs."""


class EnumerationTooLarge(TunerError):
    """Brute-force enumeration requested for a gene length above the bound."""


class EvaluatorUnavailable(TunerError):
    """External measurement commands are absent or cannot be started."""


class UnparsableOutput(TunerError):
    """Program output stream could not be decoded for comparison."""


class ConfigError(TunerError):
    """Tool configuration file is invalid."""


class BaselineFailure(TunerError):
    """The unmodified program failed or timed out; tuning cannot proceed."""

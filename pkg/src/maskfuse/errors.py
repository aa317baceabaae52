"""Exception types shared across the package.

The CLI maps these onto exit codes: usage errors exit 1, DataError exits 2,
InvariantViolation exits 3.
"""


class DataError(Exception):
    """Malformed, missing, or inconsistent input data."""


class InvariantViolation(Exception):
    """An internal consistency check failed; indicates a pipeline bug."""


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name for diagnostics."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage

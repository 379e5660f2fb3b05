"""
Exception hierarchy for the mitosis detection pipeline.

Every error carries a short ``category`` so the command line can report
failures as a single machine-parsable line (``error: <category>: <message>``).
"""


class MitosisError(Exception):
    """Base class for all pipeline errors."""

    category = "error"

    def __init__(self, message):
        super().__init__(message)
        self.message = message

    def one_line(self):
        """Render the error as a single line suitable for stderr."""
        text = " ".join(str(self.message).split())
        return f"error: {self.category}: {text}"


class ConfigError(MitosisError):
    category = "config"


class DatasetError(MitosisError):
    category = "dataset"


class CheckpointError(MitosisError):
    category = "checkpoint"


class PrerequisiteError(MitosisError):
    category = "prerequisite"


class TrainingError(MitosisError):
    category = "training"


class ShapeError(MitosisError, ValueError):
    category = "shape"


class OutputError(MitosisError):
    category = "io"

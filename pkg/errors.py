"""Exception hierarchy shared by every stage of the SEA pipeline."""

from typing import List, Optional


class SEAError(Exception):
    """Base class for all errors raised by this project"""


class ConfigError(SEAError, ValueError):
    """Invalid run configuration or settings"""


class LoadError(SEAError):
    """Dataset or file could not be loaded"""


class SchemaError(SEAError, ValueError):
    """A record violates the dataset schema"""


class DataError(SEAError):
    """Data needed by an operation is absent"""


class InputError(SEAError, ValueError):
    """Operation precondition violated by its arguments"""


class ShapeError(SEAError, ValueError):
    """Tensor or grid dimensions do not line up"""


class TemplateError(SEAError, ValueError):
    """Caption template is malformed"""


class MetricError(SEAError, ValueError):
    """Metric undefined for the given inputs"""


class CheckpointError(SEAError):
    """Checkpoint cannot be used with the current vocabulary or config"""


class TrainingAbort(SEAError):
    """Training stopped on a non-finite loss"""

    def __init__(self, message: str, sample_ids: Optional[List[str]] = None, dump_path: Optional[str] = None):
        super().__init__(message)
        self.sample_ids = sample_ids or []
        self.dump_path = dump_path

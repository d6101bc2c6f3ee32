"""Feature map export bridge: backbones in, tensor files out."""

from .errors import BridgeError, ImageError, JobError
from .export import export
from .job import ExportJob, ImageSpec
from .preprocess import PreprocessConfig

__version__ = "0.1.0"

__all__ = [
    "BridgeError", "ExportJob", "ImageError", "ImageSpec", "JobError",
    "PreprocessConfig", "export",
]

"""dishvol: metric food volume estimation from two images of a dish."""

__version__ = "0.1.0"

from .calibration import ReferenceCard, calibrate
from .config import PipelineConfig, load_config
from .geometry import CameraIntrinsics, Plane, Point3, RelativePose
from .image import ImageGray
from .pipeline import run_pipeline, run_pipeline_arrays
from .volume import VolumeReport

__all__ = [
    "CameraIntrinsics", "ImageGray", "Plane", "PipelineConfig", "Point3",
    "ReferenceCard", "RelativePose", "VolumeReport", "calibrate",
    "load_config", "run_pipeline", "run_pipeline_arrays", "__version__",
]

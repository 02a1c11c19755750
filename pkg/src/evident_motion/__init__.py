"""Moving-object detection in lidar sequences with evidential occupancy and image validation."""
from .evidential import VACUOUS, Belief, DiscretizeParams, OccupancyParams, compare, discretize, fuse
from .motion import ScanIndex, ScanWindow, WindowParams, detect_window
from .pipeline import Detector, PipelineConfig, load_sequence, run_sequence
from .scan_io import Label, Pose, ScanRecord
from .validation import ValidationParams, validate_candidates

__version__ = "0.1.0"

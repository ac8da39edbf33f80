"""Ultrasonic pressure-tube flaw detection: scan I/O, synthesis, CNN classification and depth filtering."""

from .detector import Detection, FlawCNNClassifier, build_model, classify_scan, inspect_scan
from .postproc import DepthPostProcessor, PostProcConfig, filter_detections
from .scan import FlawKind, FlawRegion, ScanHeader, ScanVolume, read_scan, write_scan
from .sigproc import BundleExtractor, bundle, detect_peak
from .synth import FlawSpec, SynthConfig, build_depth_field, synthesize_scan

__version__ = "0.1.0"

__all__ = [
    "BundleExtractor",
    "DepthPostProcessor",
    "Detection",
    "FlawCNNClassifier",
    "FlawKind",
    "FlawRegion",
    "FlawSpec",
    "PostProcConfig",
    "ScanHeader",
    "ScanVolume",
    "SynthConfig",
    "build_depth_field",
    "build_model",
    "bundle",
    "classify_scan",
    "detect_peak",
    "filter_detections",
    "inspect_scan",
    "read_scan",
    "synthesize_scan",
    "write_scan",
]

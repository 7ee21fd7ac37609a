"""Glisson line extraction and fibrosis staging on B-mode ultrasound rasters."""
from .imaging import (GradientField, ParameterError, SradParams, enhance_contrast, extract_roi,
                      prewitt_gradient, resize, srad_despeckle)
from .line import LinePath, TrackParams, extract_line, line_to_binary, path_segments
from .features import FeatureVector, compute_features
from .pipeline import PipelineConfig, process_image

__version__ = "0.1.0"

"""Mono-to-stereo audio deepfake detection."""

from ._core import (
    Converter,
    Detector,
    IoError,
    ParseError,
    ShapeError,
    TrainingAborted,
    ValidationError,
    compute_eer,
    enforce_warp,
    log_spectrogram,
    read_wav,
    run_cli,
    full_shapes,
    write_wav,
)

__all__ = [
    "Converter",
    "Detector",
    "IoError",
    "ParseError",
    "ShapeError",
    "TrainingAborted",
    "ValidationError",
    "compute_eer",
    "enforce_warp",
    "log_spectrogram",
    "read_wav",
    "run_cli",
    "full_shapes",
    "write_wav",
]

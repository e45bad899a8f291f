"""Violin performance audio -> bowing/fingering labels -> 3D skeletal motion."""

__version__ = "0.1.0"

from . import (audio_features, bf_model, dataset_io, labels, metrics,
               motion_model, synth_data, trainer)

__all__ = [
    "audio_features", "bf_model", "dataset_io", "labels", "metrics",
    "motion_model", "synth_data", "trainer", "__version__",
]

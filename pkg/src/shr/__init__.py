"""Occlusion-robust 3D face model registration with SensiblePoints."""
from .config import RunConfig
from .geometry import Model3D, PoseHypothesis, estimate_weak_perspective, fixture_model, nrme
from .refine import register_baseline, run_inference

__all__ = [
    "Model3D",
    "PoseHypothesis",
    "RunConfig",
    "estimate_weak_perspective",
    "fixture_model",
    "nrme",
    "register_baseline",
    "run_inference",
]

__version__ = "0.1.0"

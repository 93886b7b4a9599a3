"""Capsule + attention spatio-temporal crop classifier on a small numpy autodiff core."""

from .model import ModelConfig, ModelState, build, forward, predict, preset

__version__ = "0.1.0"

__all__ = ["ModelConfig", "ModelState", "build", "forward", "predict", "preset"]

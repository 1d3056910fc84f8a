"""Hybrid windowed-attention classifier with ROI cropping, CBAM gating and teacher distillation."""

from .model import PRESETS, Model, ModelConfig, build, preset

__version__ = "0.1.0"

__all__ = ["PRESETS", "Model", "ModelConfig", "build", "preset", "__version__"]

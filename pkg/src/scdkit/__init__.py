"""scdkit: spatial-correlation distillation with a feature Refiner on a
miniature ViT, plus the synthetic-scene diagnostic suite."""

from .kernels import BACKEND

__all__ = ["BACKEND"]
__version__ = "0.1.0"

"""Saliency-guided self-supervised Vision Transformer pretraining on a small numpy autodiff core."""

__version__ = "0.1.0"

"""Saliency-guided image editing by gradient descent through a differentiable saliency model."""

__version__ = "0.1.0"

"""Skeletal motion recovery from image-space references and stiffness estimation with differentiable implicit FEM."""

__version__ = "0.1.0"

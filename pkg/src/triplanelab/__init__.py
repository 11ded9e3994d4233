"""Continual triplane fitting and cascaded triplane diffusion on synthetic scenes."""

__version__ = "0.1.0"

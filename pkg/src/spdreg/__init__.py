"""Riemannian tangent-space features for EEG reaction-time regression."""

__version__ = "0.1.0"

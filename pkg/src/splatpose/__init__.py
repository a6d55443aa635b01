"""Pose-free Gaussian splatting with Plücker-ray camera recovery, at desk scale."""

__version__ = "0.1.0"

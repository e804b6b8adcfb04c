"""Dual-deformation dynamic Gaussian splatting at desk scale."""

__version__ = "0.1.0"

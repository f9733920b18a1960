"""Diffeomorphic alignment of paired endpoint point clouds on two spheres."""

__version__ = "0.1.0"

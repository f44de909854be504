"""Differentiable rigid-body simulation for mass identification and force-aware grasping."""

__version__ = "0.1.0"

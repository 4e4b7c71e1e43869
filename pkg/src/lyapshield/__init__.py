"""Learned-Lyapunov shielded residual control for a planar two-link arm."""

__version__ = "0.1.0"

"""Sparse variational deep kernel learning for inverse dynamics and
variance-scheduled computed-torque control."""

__version__ = "0.1.0"

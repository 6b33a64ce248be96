"""Workbench for gated linear networks, frozen-gate ReLU networks, and the
fixed-margin convex programs their gradient-descent training converges to."""

__version__ = "0.1.0"

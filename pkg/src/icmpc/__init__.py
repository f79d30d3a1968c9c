"""Input-convex sequence models and convex MPC for building demand response."""

__version__ = "0.1.0"

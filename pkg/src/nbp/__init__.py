"""Input-anchored bridge diffusion over functions."""

__version__ = "0.1.0"

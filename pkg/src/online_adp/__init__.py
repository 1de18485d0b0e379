"""Online abstract dynamic programming under time-varying contractive models."""

__version__ = "0.1.0"

"""Joint Bayesian clustering and registration of functional data."""

__version__ = "0.1.0"

"""Knowledge-link graph alignment for multivariate time-series learning."""

__version__ = "0.1.0"

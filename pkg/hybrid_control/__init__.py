"""Treatment effect estimation for trials augmented with external controls."""

__version__ = "1.0.0"

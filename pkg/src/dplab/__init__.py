"""dplab: differentially private training, inference attacks and leakage metrics."""

__version__ = "0.1.0"

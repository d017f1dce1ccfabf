"""Multi-robot coverage and exploration with aggregation graph neural networks."""

__version__ = "0.1.0"

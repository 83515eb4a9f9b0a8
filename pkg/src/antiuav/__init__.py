"""Anti-UAV tracking toolkit: evaluation metrics, annotation handling, a synthetic
benchmark generator and a query-guided tracker trained with dual-flow semantic
consistency."""

__version__ = "0.1.0"

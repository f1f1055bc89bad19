"""Group-aware decision thresholds for imbalanced binary classification."""

__version__ = "0.1.0"

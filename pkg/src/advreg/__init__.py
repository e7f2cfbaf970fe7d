"""Question-only adversarial and difference-of-entropies regularization for two-stream classifiers."""

__version__ = "0.1.0"

"""Category-routed cascade vector search with a synthetic benchmark harness."""

__version__ = "0.1.0"

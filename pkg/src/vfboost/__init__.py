"""Two-party vertically partitioned gradient boosting with structured noise."""

__version__ = "0.1.0"

"""Online self-adaptive anomaly detection for streaming feature data."""

__version__ = "0.1.0"

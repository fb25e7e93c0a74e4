"""Sleep-apnea event detection and AHI estimation from wearable respiration."""

__version__ = "0.1.0"

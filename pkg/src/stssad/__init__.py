"""Self-tuning augmentation for self-supervised anomaly detection."""

__version__ = "0.1.0"

"""Identity-shortcut-resistant feature reconstruction for anomaly detection."""

__version__ = "0.1.0"

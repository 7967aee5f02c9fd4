"""BCG to ECG reconstruction, heartbeat detection and HR/HRV agreement."""

__version__ = "0.1.0"

"""Distributed digital-twin anomaly detection for converter-interfaced wind generators."""

__version__ = "0.1.0"

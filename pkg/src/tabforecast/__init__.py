"""Personalised beat-to-beat blood pressure forecasting with TABNet."""

__version__ = "0.1.0"

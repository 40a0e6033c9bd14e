"""Federated short-term load forecasting with hyperparameter-based client clustering."""

__version__ = "0.1.0"

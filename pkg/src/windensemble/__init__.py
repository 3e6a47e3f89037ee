"""Dynamic ensemble wind-power forecasting with graph state embeddings."""

__version__ = "0.1.0"

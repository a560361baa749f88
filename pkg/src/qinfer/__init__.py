"""Infer participants' dataset quality in federated learning from aggregated rounds only."""

__version__ = "0.1.0"

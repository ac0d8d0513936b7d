"""Generative sequential retrieval with time-aware multi-item pre-training and condition-guided fine-tuning."""

__version__ = "0.1.0"

"""Domain-adversarial multitask LSTM for cuffless blood pressure estimation."""

__version__ = "0.1.0"

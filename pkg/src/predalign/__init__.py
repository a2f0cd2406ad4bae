"""Domain-adaptive single-shot detection by adversarial prediction alignment."""

__version__ = "0.1.0"

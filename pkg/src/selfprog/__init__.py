"""Self-reprogramming search over neural network source specs."""

__version__ = "0.1.0"

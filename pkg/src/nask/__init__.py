"""Two-stage curved scene-text detection toolkit."""

__version__ = "0.1.0"

"""Question-guided attention network for single-word visual question answering."""

__version__ = "0.1.0"

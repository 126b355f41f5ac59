"""Evidence-augmented counter-argument generation."""

__version__ = "0.1.0"

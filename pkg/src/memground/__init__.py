"""Memory-augmented temporal grounding on a synthetic long-tail corpus."""

__version__ = "0.1.0"

"""Context-conditioned text-to-speech research toolkit."""

__version__ = "0.1.0"

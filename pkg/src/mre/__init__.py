"""One-pass multiple-relation extraction with entity-aware self-attention."""

__version__ = "0.1.0"

"""Table-to-text generation with a hierarchical set encoder and a copy decoder."""

__version__ = "0.1.0"

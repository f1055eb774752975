"""Signal-propagation lab for decoder-only Transformers."""

__version__ = "0.1.0"

"""Context-dependent mobile-usage estimation and cost-aware context selection."""

__version__ = "0.1.0"

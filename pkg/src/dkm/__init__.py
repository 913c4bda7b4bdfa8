"""Cross-domain few-shot learning with domain knowledge mapping, at desk scale."""

__version__ = "0.1.0"

"""Semantic-operator prediction from POS tags, plus a conditioned copy decoder and a margin tree scorer."""

__version__ = "0.1.0"

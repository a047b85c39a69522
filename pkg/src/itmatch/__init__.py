"""Consensus-aware image-text matching with mined hard negatives."""

__version__ = "0.1.0"

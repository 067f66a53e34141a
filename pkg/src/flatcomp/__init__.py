"""Compression-aware fine-tuning toolkit: SAM training, one-shot pruning, PTQ and diagnostics."""

__version__ = "0.1.0"

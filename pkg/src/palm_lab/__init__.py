"""Attention degeneration in decoder-only seq2seq models, and partial attention."""

__version__ = "0.1.0"

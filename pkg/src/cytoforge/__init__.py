"""Whole-slide cytology tooling: tiling, cell copy-pasting, k-NN evaluation and top-k MIL."""

__version__ = "0.1.0"

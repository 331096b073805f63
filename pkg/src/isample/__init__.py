"""Error-map driven patch sampling for sparse segmentation, with a hand-written dual-path CNN."""

__version__ = "0.1.0"

"""Dual-view X-ray detection fusion: saliency localisation in the auxiliary view,
lambda-based cross-view transfer, expert refinement and fusion, plus tooling."""

__version__ = "0.1.0"

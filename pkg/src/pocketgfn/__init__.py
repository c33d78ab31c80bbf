"""Pocket-conditioned GFlowNet molecule generation with a geometry-aware conditioning stack."""

__version__ = "0.1.0"

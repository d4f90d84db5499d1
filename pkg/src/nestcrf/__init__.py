"""Nested named-entity recognition engine.

Adaptive layer weighting over a multi-layer encoder, one linear-chain CRF per
category-class, and an attentive-residual second decoding pass.
"""

__version__ = "0.1.0"

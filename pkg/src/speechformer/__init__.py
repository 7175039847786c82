"""Speechformer: ConvAttention encoders with CTC compression for speech translation."""

__version__ = "0.1.0"

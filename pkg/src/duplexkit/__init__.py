"""Token-plane machinery for full-duplex speech-text dialogue models."""

__version__ = "0.1.0"

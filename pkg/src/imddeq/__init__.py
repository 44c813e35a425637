"""Adaptive CNN equalizer for IM/DD links: channel, training, quantization and pipeline models."""

__version__ = "0.1.0"

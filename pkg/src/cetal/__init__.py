"""Channel-wise enhanced temporal action localization on multichannel sensor features."""

__version__ = "0.1.0"

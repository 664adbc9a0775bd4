"""Offsite-tuning on a toy scale: sandwich adapters, compressed emulators, plug-in."""

__version__ = "0.1.0"

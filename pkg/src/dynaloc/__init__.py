"""Fingerprint-based indoor localization under environment change."""

__version__ = "0.1.0"

"""Test-time adaptation benchmark engine for on-device constraints."""

__version__ = "0.1.0"

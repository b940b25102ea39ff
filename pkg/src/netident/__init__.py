"""User-centric forensic analysis of encrypted network traffic metadata."""

__version__ = "0.1.0"

"""Safe promotion of vendor-signed files to privileged status."""

__version__ = "0.1.0"

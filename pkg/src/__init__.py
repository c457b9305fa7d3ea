"""NDT Untwin - deterministic simulator for removing network digital twins from a shared model."""

__version__ = "0.1.0"

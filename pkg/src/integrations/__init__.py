"""Artifact persistence: binary models, checkpoints, histories and CSV tables."""

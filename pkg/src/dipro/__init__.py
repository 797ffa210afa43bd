"""Disentangled, progression-aware fusion of region snapshots with EHR series."""

__version__ = "0.1.0"

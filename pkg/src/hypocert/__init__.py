"""Hypocoercivity certificates for the spherical velocity Langevin process."""

__version__ = "0.1.0"

"""Coupled moist-air, droplet-spectrum and radiation simulator."""
__version__ = "0.1.0"

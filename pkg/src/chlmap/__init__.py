"""Chlorophyll-a retrieval from multispectral band stacks and buoy profiles."""

__version__ = "0.1.0"

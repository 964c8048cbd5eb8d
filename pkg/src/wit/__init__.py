"""Waypoint-conditioned pixel-space flow matching at desk scale."""
from .flow import NULL_CLASS

__version__ = "0.1.0"

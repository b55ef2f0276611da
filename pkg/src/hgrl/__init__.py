"""Hierarchical graph representation learning for image manipulation localisation, in numpy."""

__version__ = "0.1.0"

"""Multi-initialization optimization pipeline for monocular 3D body recovery."""

__version__ = "0.1.0"

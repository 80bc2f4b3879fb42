"""Graph-convolutional refinement of 3D vehicle proposals."""

__version__ = "0.1.0"

"""Two-pass multi-view 3D pose estimation with learned 2D bias correction."""

__version__ = "0.1.0"

"""Desk-scale animatable Gaussian avatars: a feed-forward encoder maps a few
conditioning images to a rigged 3D Gaussian avatar that a lightweight pose
decoder then drives in real time."""

__version__ = "0.1.0"

"""Two-stage correspondence matching: patch-level proposals refined to
pixel-level matches under epipolar weak supervision."""

__version__ = "0.1.0"

"""Random walks of affine maps on 2-step nilmanifolds."""

__version__ = "0.1.0"

"""Point-of-gaze estimation from paired face and scene cameras."""

__version__ = "0.1.0"

"""Dynamic stereo scene reconstruction: motion segmentation, tracking and mapping."""

__version__ = "0.1.0"

"""Ball detection as a segmentation problem."""

__version__ = "0.1.0"

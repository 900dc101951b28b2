"""Reference guidance/segmentation server for the gscompose wire protocol."""

__version__ = "0.1.0"

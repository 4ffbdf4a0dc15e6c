"""Three-class mood prediction from short video chunks, with emotion-change auxiliary labels."""

__version__ = "0.1.0"

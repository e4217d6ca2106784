"""Few-shot MRI transformer pipeline."""

__version__ = "0.1.0"

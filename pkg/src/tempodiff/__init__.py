"""Class-conditional diffusion for windowed sensor sequences, with temporal adapters."""

__version__ = "0.1.0"

"""Class-incremental activity recognition with per-task VAE replay."""

__version__ = "0.1.0"

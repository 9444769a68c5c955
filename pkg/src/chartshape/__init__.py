"""Chart question answering with paired counterpart views and KL-shaped policy training."""

__version__ = "0.1.0"

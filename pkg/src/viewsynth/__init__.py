"""Single-image novel-view generation: renderer, generator network, training and evaluation."""

__version__ = "0.1.0"

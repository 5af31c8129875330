"""Single-image raindrop removal with an attentive generative adversarial network."""

__version__ = "0.1.0"

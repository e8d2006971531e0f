"""Zero-resource translation learned through a two-agent image captioning game."""

__version__ = "0.1.0"

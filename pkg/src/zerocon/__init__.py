"""Text-guided image editing with cross-attention and patch-contrastive guidance."""

__version__ = "0.1.0"

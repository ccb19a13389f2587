"""Self-distilled ViT features with dual-stream multiple-instance learning for slide classification."""

__version__ = "0.1.0"

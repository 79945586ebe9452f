"""Few-shot text classification with hardness-weighted meta-tasks and a Siamese encoder."""
__version__ = "0.1.0"

"""alignsum: cross-modal alignment encoder + contrastive training for
abstractive summarization of paired text and images, on a self-contained
numpy autodiff substrate."""

__version__ = "0.1.0"

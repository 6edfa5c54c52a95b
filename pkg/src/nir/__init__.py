"""nir: bidirectional text-image retrieval and image suggestion for news articles."""

__version__ = "0.1.0"

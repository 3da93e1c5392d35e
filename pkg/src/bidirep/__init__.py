"""bidirep: train a small backward causal LM and fuse its token
representations with a forward LM's to recover bidirectional context for
token classification."""

__version__ = "0.1.0"

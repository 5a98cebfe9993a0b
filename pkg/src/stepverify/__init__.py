"""Step-level verification toolkit: corpora, scorers, process labeling, evaluation."""

__version__ = "0.1.0"

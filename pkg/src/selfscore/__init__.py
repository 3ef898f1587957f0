"""Self-training of score-and-explain models with preference optimization and TIES merging."""

__version__ = "0.1.0"

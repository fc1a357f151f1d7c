"""Weakly supervised fine-grained indexing of articles with MeSH concepts."""

__version__ = "0.1.0"

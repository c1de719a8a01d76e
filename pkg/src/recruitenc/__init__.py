"""Bilingual recruitment sentence embeddings: multi-task training, retrieval evaluation, language bias."""

__version__ = "0.1.0"

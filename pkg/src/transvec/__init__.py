"""Transducer-based language embeddings for spoken language identification."""

__version__ = "0.1.0"

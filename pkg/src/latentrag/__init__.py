"""Agentic retrieval-augmented QA where reasoning and subqueries stay in latent space."""

__version__ = "0.1.0"

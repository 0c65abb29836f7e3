"""Context-dependent knowledge-graph validation for LLM question answering."""

__version__ = "0.1.0"

"""Persona-styled, topic-steered neural response generation toolkit."""

__version__ = "0.1.0"

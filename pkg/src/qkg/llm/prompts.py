"""Prompt templates shipped as package data (``qkg/prompts/*.txt``)."""

from __future__ import annotations

from functools import lru_cache
from importlib import resources
from string import Template


@lru_cache(maxsize=None)
def _template(name: str) -> Template:
    text = resources.files("qkg").joinpath("prompts", f"{name}.txt").read_text(encoding="utf-8")
    return Template(text)


def render_prompt(name: str, **values) -> str:
    """Fill ``$placeholders`` in template ``name``; missing keys raise KeyError."""
    return _template(name).substitute(**values)

"""Exact two-sided McNemar test on discordant pair counts."""

from __future__ import annotations

from fractions import Fraction
from math import comb


def mcnemar_exact_fraction(b: int, c: int) -> Fraction:
    if b < 0 or c < 0:
        raise ValueError("discordant counts must be non-negative")
    n = b + c
    tail = sum(comb(n, k) for k in range(max(b, c), n + 1))
    return min(Fraction(1), Fraction(2 * tail, 2 ** n))


def mcnemar_exact(b: int, c: int) -> float:
    """p = min(1, 2 * sum_{k=max(b,c)}^{b+c} C(b+c, k) / 2^(b+c)), in exact integer arithmetic."""
    return float(mcnemar_exact_fraction(b, c))


def format_p(p: float) -> str:
    """Two significant digits, always with a decimal point (``1.0``, ``0.73``, ``3.8e-06``)."""
    s = f"{p:.2g}"
    if "." not in s and "e" not in s:
        s += ".0"
    return s

"""Exact one-decimal percentage formatting shared by reports.

All rounding is half-up on exact integer/rational arithmetic so rendered
values never drift from the counts they were derived from.
"""

from __future__ import annotations

from fractions import Fraction


def percent_tenths(numerator: int, denominator: int) -> int:
    """Tenths of a percent of numerator/denominator, rounded half-up.

    Computed purely in integer arithmetic: e.g. 191/197 -> 970 ("97.0%").
    """
    if denominator <= 0:
        raise ValueError("denominator must be positive")
    if numerator < 0:
        raise ValueError("numerator must be non-negative")
    return (2 * numerator * 1000 + denominator) // (2 * denominator)


def fraction_percent_tenths(value: Fraction) -> int:
    """Tenths of a percent of an exact rational in [0, 1], half-up."""
    return percent_tenths(value.numerator, value.denominator)


def tenths_string(tenths: int) -> str:
    """Render tenths-of-percent as a one-decimal string: 970 -> "97.0"."""
    return f"{tenths // 10}.{tenths % 10}"


def percent_string(numerator: int, denominator: int) -> str:
    return tenths_string(percent_tenths(numerator, denominator))


def count_pct_cell(count: int, total: int) -> str:
    """Format a tally as "count (pct%)", e.g. 3486/16656 -> "3486 (20.9%)"."""
    return f"{count} ({percent_string(count, total)}%)"

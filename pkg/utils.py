"""Shared helpers: hyperparameter grids, list parsing and number formatting."""
from __future__ import annotations

import math

# Mantissas of the "nice" log grid.  Consecutive values are roughly ln(1.5)
# apart on the log scale: ... 0.7, 1.0, 1.5, 2.0, 3.0, 5.0, 7.0, 10.0, 15.0 ...
GRID_MANTISSAS: tuple[float, ...] = (1.0, 1.5, 2.0, 3.0, 5.0, 7.0)


def log_grid(low: float, high: float) -> list[float]:
    """Nice log-spaced values in [low, high].

    Examples: log_grid(2, 10) → [2.0, 3.0, 5.0, 7.0, 10.0]
              log_grid(0.5, 1.5) → [0.5, 0.7, 1.0, 1.5]
    """
    if low <= 0 or high < low:
        raise ValueError(f"log_grid needs 0 < low <= high, got {low}, {high}")
    values = []
    decade = math.floor(math.log10(low)) - 1
    while True:
        scale = 10.0 ** decade
        for m in GRID_MANTISSAS:
            v = float(f"{m * scale:.10g}")
            if v > high * (1 + 1e-12):
                return values
            if v >= low * (1 - 1e-12):
                values.append(v)
        decade += 1


def parse_float_list(text: str | None) -> list[float]:
    """Parse '2,3,5' or '2 3 5' into floats; empty/None → []."""
    if text is None:
        return []
    parts = [p for p in text.replace(";", ",").replace(" ", ",").split(",") if p]
    return [float(p) for p in parts]


def fmt_float(value, digits: int = 4) -> str:
    try:
        v = float(value)
    except (TypeError, ValueError):
        return "nan"
    if math.isnan(v):
        return "nan"
    return f"{v:.{digits}f}"


def fmt_estimate(theta: float, se: float, digits: int = 3) -> str:
    """Format as '1.023 (SE 0.114)'."""
    return f"{fmt_float(theta, digits)} (SE {fmt_float(se, digits)})"

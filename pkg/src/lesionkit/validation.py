"""Input validation helpers shared by the numerical kernels and metrics."""

from __future__ import annotations

import numpy as np


class GeometryError(ValueError):
    """Raised when two volumes do not share dims and spacing."""


def check_geometry(a, b, names=("a", "b")) -> None:
    """Require identical dims and spacing on two VolumeGrid-like objects."""
    if a.dims != b.dims or a.spacing != b.spacing:
        raise GeometryError(
            f"geometry mismatch: {names[0]} has dims={a.dims} spacing={a.spacing}, "
            f"{names[1]} has dims={b.dims} spacing={b.spacing}"
        )


def check_finite(data: np.ndarray, name: str = "data") -> None:
    """Reject NaN/Inf, naming the first offending flat index."""
    bad = ~np.isfinite(data)
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise ValueError(f"non-finite value in {name} at flat index {idx}: {data.flat[idx]!r}")


def check_binary(data: np.ndarray, name: str = "mask") -> None:
    if not np.all((data == 0.0) | (data == 1.0)):
        bad = np.flatnonzero((data != 0.0) & (data != 1.0))[0]
        raise ValueError(f"{name} is not binary at flat index {int(bad)}: {data.flat[bad]!r}")


def check_unit_range(data: np.ndarray, name: str = "values") -> None:
    if data.size and (np.min(data) < 0.0 or np.max(data) > 1.0):
        bad = np.flatnonzero((data < 0.0) | (data > 1.0))[0]
        raise ValueError(f"{name} outside [0, 1] at flat index {int(bad)}: {data.flat[bad]!r}")


def check_positive_triple(values, name: str) -> tuple[float, float, float]:
    vals = tuple(float(v) for v in values)
    if len(vals) != 3 or not all(np.isfinite(v) and v > 0 for v in vals):
        raise ValueError(f"{name} must be 3 strictly positive finite values, got {values!r}")
    return vals

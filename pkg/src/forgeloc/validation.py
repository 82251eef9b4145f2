"""Input validation helpers shared across the package."""

from __future__ import annotations

from typing import Sequence

import numpy as np


def as_float_matrix(x, *, name: str = "X", dtype=np.float64) -> np.ndarray:
    """Coerce *x* to a finite 2-D float array of shape (frames, features)."""
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D (frames x features), got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must have at least one frame and one feature, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def as_score_vector(x, *, name: str = "scores") -> np.ndarray:
    """Coerce *x* to a finite 1-D float64 vector."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def as_probability_vector(x, *, name: str = "probs") -> np.ndarray:
    """Like :func:`as_score_vector` but additionally requires values in [0, 1]."""
    arr = as_score_vector(x, name=name)
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{name} must lie in [0, 1]")
    return arr


def as_binary_vector(x, *, name: str = "labels") -> np.ndarray:
    """Coerce *x* to a 1-D int array containing only 0s and 1s."""
    arr = np.asarray(x)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    arr = arr.astype(np.int64)
    if arr.size and not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{name} must contain only 0/1 values")
    return arr


def check_utterance_label(label, *, name: str = "utterance_label") -> int:
    lab = int(label)
    if lab not in (0, 1):
        raise ValueError(f"{name} must be 0 or 1, got {label!r}")
    return lab


def check_fps(fps, *, name: str = "fps") -> int:
    value = int(fps)
    if value < 1 or value != fps:
        raise ValueError(f"{name} must be a positive integer, got {fps!r}")
    return value


def check_segments(
    segments: Sequence[Sequence[float]],
    duration: float,
    *,
    name: str = "segments",
) -> list[tuple[float, float]]:
    """Validate (start, end) pairs in seconds: sorted, disjoint, inside [0, duration].

    A tiny tolerance absorbs float round-off on the upper bound.
    """
    out: list[tuple[float, float]] = []
    prev_end = -np.inf
    tol = 1e-9 * max(1.0, duration)
    for k, seg in enumerate(segments):
        if len(seg) != 2:
            raise ValueError(f"{name}[{k}] must be a (start, end) pair")
        start, end = float(seg[0]), float(seg[1])
        if not (np.isfinite(start) and np.isfinite(end)):
            raise ValueError(f"{name}[{k}] contains non-finite values")
        if not (0.0 <= start < end):
            raise ValueError(f"{name}[{k}] must satisfy 0 <= start < end, got ({start}, {end})")
        if end > duration + tol:
            raise ValueError(
                f"{name}[{k}] ends at {end} s, beyond the utterance duration {duration} s"
            )
        if start < prev_end:
            raise ValueError(f"{name} must be sorted and non-overlapping (violation at index {k})")
        prev_end = end
        out.append((start, min(end, duration)))
    return out


def make_rng(seed) -> np.random.Generator:
    """Build the package-wide deterministic RNG (PCG64) from a seed or Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))

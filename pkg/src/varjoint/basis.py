"""Clamped B-spline bases on percentile knots.

Evaluation uses the Cox-de Boor recursion in its triangular (span-local)
form, so each time point touches only the ``degree + 1`` basis functions
whose support contains it.  Spans are half-open ``[k_l, k_{l+1})`` except
the last non-empty span, which is closed on the right.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class InsufficientKnots(ValueError):
    """Raised when the percentile grid collapses to a single breakpoint."""


class OutOfDomain(ValueError):
    """Raised when a time value lies outside the knot range."""


@dataclass(frozen=True, eq=False)
class BasisSpec:
    """Clamped knot vector plus degree.

    ``knots`` is the full knot vector, with the boundary breakpoints repeated
    ``degree + 1`` times.
    """

    degree: int
    knots: np.ndarray

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        knots.setflags(write=False)
        object.__setattr__(self, "knots", knots)
        if self.degree < 0:
            raise ValueError("degree must be non-negative")
        if np.any(np.diff(knots) < 0):
            raise ValueError("knots must be non-decreasing")
        if knots.size < 2 * (self.degree + 1):
            raise InsufficientKnots("knot vector too short for the degree")

    @property
    def basis_count(self) -> int:
        return self.knots.size - self.degree - 1

    @property
    def lower(self) -> float:
        return float(self.knots[0])

    @property
    def upper(self) -> float:
        return float(self.knots[-1])

    @property
    def breakpoints(self) -> np.ndarray:
        return np.unique(self.knots)

    def greville(self) -> np.ndarray:
        """Greville abscissae, one per basis function."""
        d = self.degree
        k = self.knots
        if d == 0:
            return 0.5 * (k[:-1] + k[1:])
        csum = np.concatenate([[0.0], np.cumsum(k)])
        idx = np.arange(self.basis_count)
        return (csum[idx + d + 1] - csum[idx + 1]) / d

    def to_dict(self) -> dict:
        return {"degree": self.degree, "knots": self.knots.tolist()}

    @classmethod
    def from_dict(cls, payload: dict) -> "BasisSpec":
        return cls(int(payload["degree"]), np.asarray(payload["knots"], dtype=float))


def clamped_knots(breakpoints, degree: int = 3) -> BasisSpec:
    """Clamp sorted distinct breakpoints into a full knot vector."""
    bp = np.unique(np.asarray(breakpoints, dtype=float))
    if bp.size < 2:
        raise InsufficientKnots(
            f"need at least 2 distinct breakpoints, got {bp.size}")
    knots = np.concatenate([
        np.repeat(bp[0], degree), bp, np.repeat(bp[-1], degree)])
    return BasisSpec(degree, knots)


def percentile_levels(percentile_step: float) -> np.ndarray:
    if not 0 < percentile_step <= 50:
        raise ValueError("percentile_step must lie in (0, 50]")
    n = int(np.floor(100.0 / percentile_step + 1e-9))
    levels = percentile_step * np.arange(n + 1)
    if levels[-1] < 100.0 - 1e-9:
        levels = np.append(levels, 100.0)
    levels[-1] = 100.0
    return levels


def build_knots(times, percentile_step: float = 2.0, degree: int = 3) -> BasisSpec:
    """Breakpoints at every ``percentile_step`` percentile of ``times``.

    Percentiles use linear interpolation between order statistics.  Tied
    percentile values are merged before the boundary knots are clamped.
    """
    t = np.asarray(times, dtype=float).ravel()
    if t.size == 0:
        raise ValueError("times must be non-empty")
    if not np.all(np.isfinite(t)):
        raise ValueError("times must be finite")
    bp = np.percentile(np.sort(t), percentile_levels(percentile_step))
    return clamped_knots(bp, degree)


def find_spans(t, spec: BasisSpec) -> np.ndarray:
    """Index ``k`` with ``knots[k] <= t < knots[k+1]`` (closed at the top)."""
    t = np.asarray(t, dtype=float)
    if np.any(t < spec.lower) or np.any(t > spec.upper) or np.any(np.isnan(t)):
        bad = t[(t < spec.lower) | (t > spec.upper) | np.isnan(t)]
        raise OutOfDomain(
            f"time {bad.flat[0]!r} outside knot range [{spec.lower}, {spec.upper}]")
    k = np.searchsorted(spec.knots, t, side="right") - 1
    return np.clip(k, spec.degree, spec.basis_count - 1)


def design_rows(t, spec: BasisSpec) -> tuple[np.ndarray, np.ndarray]:
    """Sparse design rows for a batch of times.

    Returns ``(start, values)`` where ``values[m, r]`` is the value of basis
    function ``start[m] + r`` at ``t[m]``; every other basis function is zero.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    d = spec.degree
    kn = spec.knots
    span = find_spans(t, spec)
    m = t.size
    N = np.zeros((m, d + 1))
    N[:, 0] = 1.0
    left = np.zeros((m, d + 1))
    right = np.zeros((m, d + 1))
    for j in range(1, d + 1):
        left[:, j] = t - kn[span + 1 - j]
        right[:, j] = kn[span + j] - t
        saved = np.zeros(m)
        for r in range(j):
            temp = N[:, r] / (right[:, r + 1] + left[:, j - r])
            N[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        N[:, j] = saved
    return span - d, N


def design_row(t: float, spec: BasisSpec) -> tuple[int, np.ndarray]:
    """Nonzero span of the basis vector at a single time."""
    start, vals = design_rows([t], spec)
    return int(start[0]), vals[0]


def basis_eval(t: float, spec: BasisSpec) -> np.ndarray:
    """Dense vector ``(Phi_1(t), ..., Phi_L(t))``."""
    start, vals = design_row(t, spec)
    out = np.zeros(spec.basis_count)
    out[start:start + spec.degree + 1] = vals
    return out


def design_matrix(t, spec: BasisSpec) -> np.ndarray:
    """Dense ``(len(t), L)`` design matrix."""
    start, vals = design_rows(t, spec)
    out = np.zeros((start.size, spec.basis_count))
    rows = np.arange(start.size)[:, None]
    cols = start[:, None] + np.arange(spec.degree + 1)[None, :]
    out[rows, cols] = vals
    return out

"""Analytic signed-distance fields for building shapes on a grid.

Distances are exact for the primitives; boolean combinations (min/max) are
only lower bounds near the cut, so callers should redistance afterwards.
"""
from __future__ import annotations

import numpy as np

from .grid import GridSpec


def _points(grid: GridSpec) -> np.ndarray:
    return grid.node_positions()


def sphere(grid: GridSpec, center, radius: float) -> np.ndarray:
    p = _points(grid) - np.asarray(center, dtype=float)
    return np.linalg.norm(p, axis=-1) - float(radius)


def box(grid: GridSpec, center, half_extents) -> np.ndarray:
    """Exact SDF of an axis-aligned box."""
    p = np.abs(_points(grid) - np.asarray(center, dtype=float))
    q = p - np.asarray(half_extents, dtype=float)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return outside + inside


def box_from_bounds(grid: GridSpec, lo, hi) -> np.ndarray:
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    return box(grid, 0.5 * (lo + hi), 0.5 * (hi - lo))


def half_space(grid: GridSpec, point, normal) -> np.ndarray:
    """Negative on the side the (outward) normal points away from."""
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    p = _points(grid) - np.asarray(point, dtype=float)
    return p @ n


def cylinder(grid: GridSpec, p0, p1, radius: float) -> np.ndarray:
    """Exact SDF of a flat-capped cylinder with axis from p0 to p1."""
    a = np.asarray(p0, dtype=float)
    b = np.asarray(p1, dtype=float)
    axis = b - a
    length = np.linalg.norm(axis)
    axis = axis / length
    p = _points(grid) - a
    t = p @ axis
    radial = np.linalg.norm(p - t[..., None] * axis, axis=-1) - float(radius)
    axial = np.maximum(-t, t - length)
    outside = np.sqrt(np.maximum(radial, 0.0) ** 2 + np.maximum(axial, 0.0) ** 2)
    inside = np.minimum(np.maximum(radial, axial), 0.0)
    return outside + inside


def capsule(grid: GridSpec, p0, p1, radius: float) -> np.ndarray:
    a = np.asarray(p0, dtype=float)
    b = np.asarray(p1, dtype=float)
    axis = b - a
    denom = float(axis @ axis)
    p = _points(grid) - a
    t = np.clip((p @ axis) / denom, 0.0, 1.0) if denom > 0 else np.zeros(p.shape[:-1])
    return np.linalg.norm(p - t[..., None] * axis, axis=-1) - float(radius)


def union(*fields) -> np.ndarray:
    out = fields[0]
    for f in fields[1:]:
        out = np.minimum(out, f)
    return out


def intersect(*fields) -> np.ndarray:
    out = fields[0]
    for f in fields[1:]:
        out = np.maximum(out, f)
    return out


def subtract(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Material of `a` with `b` carved away."""
    return np.maximum(a, -b)

"""Uniform node-grid bookkeeping and trilinear field sampling.

All fields in the package (signed distance, speed, temperature) live on the
same kind of axis-aligned uniform node grid described by :class:`GridSpec`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.ndimage import map_coordinates


@dataclass(frozen=True)
class GridSpec:
    """Geometry of a uniform node grid.

    ``origin`` is the world position (mm) of node (0, 0, 0), ``spacing`` the
    node pitch h (mm), ``dims`` the node count per axis.  Cells are the
    (dims - 1) per-axis cubes between nodes.
    """

    origin: tuple[float, float, float]
    spacing: float
    dims: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(c) for c in self.origin))
        object.__setattr__(self, "spacing", float(self.spacing))
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        if len(self.origin) != 3 or len(self.dims) != 3:
            raise ValueError("origin and dims must have 3 components")
        if self.spacing <= 0.0:
            raise ValueError(f"grid spacing must be positive, got {self.spacing}")
        if any(n < 4 for n in self.dims):
            raise ValueError(f"need at least 4 nodes per axis, got dims={self.dims}")

    @classmethod
    def from_bounds(cls, lo, hi, spacing):
        """Grid whose nodes cover [lo, hi], bounds rounded up to whole cells."""
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        if np.any(hi <= lo):
            raise ValueError("upper bound must exceed lower bound on every axis")
        dims = tuple(int(np.ceil((b - a) / spacing - 1e-9)) + 1 for a, b in zip(lo, hi))
        return cls(tuple(lo), spacing, dims)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.dims

    @property
    def n_nodes(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def bbox_min(self) -> np.ndarray:
        return np.asarray(self.origin, dtype=float)

    @property
    def bbox_max(self) -> np.ndarray:
        return self.bbox_min + self.spacing * (np.asarray(self.dims) - 1)

    @property
    def cell_volume(self) -> float:
        return self.spacing ** 3

    def axes(self):
        """Per-axis node coordinate arrays."""
        return tuple(
            self.origin[i] + self.spacing * np.arange(self.dims[i]) for i in range(3)
        )

    def node_positions(self) -> np.ndarray:
        """(nx, ny, nz, 3) world coordinates of every node."""
        ax, ay, az = self.axes()
        xs, ys, zs = np.meshgrid(ax, ay, az, indexing="ij")
        return np.stack([xs, ys, zs], axis=-1)

    def contains(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return np.all((pts >= self.bbox_min) & (pts <= self.bbox_max), axis=1)


def sample_field(values: np.ndarray, grid: GridSpec, points) -> np.ndarray:
    """Trilinear interpolation of a node field at world points (clamped at edges)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    coords = (pts - grid.bbox_min) / grid.spacing
    out = map_coordinates(values, coords.T, order=1, mode="nearest")
    return out if np.asarray(points).ndim > 1 else out[0]


def gradient_field(values: np.ndarray, grid: GridSpec) -> tuple[np.ndarray, ...]:
    """Central-difference node gradient (one-sided at grid faces)."""
    gx, gy, gz = np.gradient(values, grid.spacing)
    return gx, gy, gz


def sample_gradient(grads, grid: GridSpec, points) -> np.ndarray:
    """Trilinear interpolation of a precomputed node gradient at world points."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    coords = ((pts - grid.bbox_min) / grid.spacing).T
    out = np.stack(
        [map_coordinates(g, coords, order=1, mode="nearest") for g in grads], axis=1
    )
    return out if np.asarray(points).ndim > 1 else out[0]


@njit(cache=True)
def trilinear(values, ox, oy, oz, h, x, y, z):  # pragma: no cover - exercised via wrappers
    """Clamped trilinear sample of a node field at one world point."""
    nx, ny, nz = values.shape
    fx = (x - ox) / h
    fy = (y - oy) / h
    fz = (z - oz) / h
    if fx < 0.0:
        fx = 0.0
    elif fx > nx - 1.0:
        fx = nx - 1.0
    if fy < 0.0:
        fy = 0.0
    elif fy > ny - 1.0:
        fy = ny - 1.0
    if fz < 0.0:
        fz = 0.0
    elif fz > nz - 1.0:
        fz = nz - 1.0
    i = int(fx)
    j = int(fy)
    k = int(fz)
    if i > nx - 2:
        i = nx - 2
    if j > ny - 2:
        j = ny - 2
    if k > nz - 2:
        k = nz - 2
    tx = fx - i
    ty = fy - j
    tz = fz - k
    c000 = values[i, j, k]
    c100 = values[i + 1, j, k]
    c010 = values[i, j + 1, k]
    c110 = values[i + 1, j + 1, k]
    c001 = values[i, j, k + 1]
    c101 = values[i + 1, j, k + 1]
    c011 = values[i, j + 1, k + 1]
    c111 = values[i + 1, j + 1, k + 1]
    c00 = c000 * (1.0 - tx) + c100 * tx
    c10 = c010 * (1.0 - tx) + c110 * tx
    c01 = c001 * (1.0 - tx) + c101 * tx
    c11 = c011 * (1.0 - tx) + c111 * tx
    c0 = c00 * (1.0 - ty) + c10 * ty
    c1 = c01 * (1.0 - ty) + c11 * ty
    return c0 * (1.0 - tz) + c1 * tz

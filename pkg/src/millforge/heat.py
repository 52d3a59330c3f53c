"""Steady-state temperature between the offset part surface and the box.

Dirichlet data: T = 0 on free nodes adjacent to the offset shape, T = 1 on
the bounding-box faces.  The interior relaxes under explicit Euler steps of
the 7-point Laplacian (dt = h^2/8) until the per-step change stalls.  The
gradient of the converged field guides the 5-axis heat search.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import EmptyShapeError
from .grid import GridSpec, gradient_field, sample_field, sample_gradient
from .levelset import LevelSet


@njit(cache=True)
def _jacobi_relax(T, update, max_steps, tol):
    """Explicit Euler / Jacobi sweeps; returns (field, steps, last change)."""
    nx, ny, nz = T.shape
    cur = T
    nxt = T.copy()
    steps = 0
    change = 0.0
    while steps < max_steps:
        change = 0.0
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    if not update[i, j, k]:
                        nxt[i, j, k] = cur[i, j, k]
                        continue
                    s = (cur[i - 1, j, k] + cur[i + 1, j, k]
                         + cur[i, j - 1, k] + cur[i, j + 1, k]
                         + cur[i, j, k - 1] + cur[i, j, k + 1])
                    v = cur[i, j, k] + (s - 6.0 * cur[i, j, k]) / 8.0
                    nxt[i, j, k] = v
                    d = abs(v - cur[i, j, k])
                    if d > change:
                        change = d
        cur, nxt = nxt, cur
        steps += 1
        if change < tol:
            break
    return cur, steps, change


@dataclass
class TemperatureField:
    grid: GridSpec
    values: np.ndarray
    free_mask: np.ndarray       # nodes updated by the solver
    inside_mask: np.ndarray     # nodes strictly inside the offset shape
    phi_plus: np.ndarray        # offset-shape signed distance, for domain checks
    steps: int = 0
    _grads: tuple | None = field(default=None, repr=False, compare=False)

    def gradients(self):
        if self._grads is None:
            gx, gy, gz = gradient_field(self.values, self.grid)
            self._grads = (
                np.ascontiguousarray(gx),
                np.ascontiguousarray(gy),
                np.ascontiguousarray(gz),
            )
        return self._grads

    def sample(self, points):
        return sample_field(self.values, self.grid, points)


def solve_heat(omega_plus: LevelSet, box: GridSpec | None = None,
               tol: float = 1e-5, initial: TemperatureField | None = None,
               max_steps: int | None = None) -> TemperatureField:
    """Relax the temperature field outside `omega_plus` to near steady state.

    `omega_plus` is the part offset by the bit radius (offsetting first is
    what seals cavity mouths narrower than the bit).  An `initial` field
    from a previous, slightly different shape warm-starts the relaxation.
    """
    grid = omega_plus.grid
    if box is not None and box != grid:
        raise ValueError("bounding-box grid must match the level-set grid")
    phi = omega_plus.values
    inside = phi < 0.0
    if not inside.any():
        raise EmptyShapeError("offset shape is empty: no zero-temperature boundary")

    boundary = np.zeros(grid.dims, dtype=bool)
    boundary[0, :, :] = boundary[-1, :, :] = True
    boundary[:, 0, :] = boundary[:, -1, :] = True
    boundary[:, :, 0] = boundary[:, :, -1] = True

    adjacent = np.zeros(grid.dims, dtype=bool)
    for axis in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        adjacent[tuple(lo)] |= inside[tuple(hi)]
        adjacent[tuple(hi)] |= inside[tuple(lo)]
    adjacent &= ~inside

    update = ~(inside | adjacent | boundary)
    if not update.any():
        raise ValueError(
            "offset shape fills the box: no free nodes between the boundary conditions"
        )

    if initial is not None and initial.grid == grid:
        T = initial.values.copy()
    else:
        T = np.ones(grid.dims)
    # zero takes precedence where the shape reaches the box faces
    T[boundary] = 1.0
    T[inside] = 0.0
    T[adjacent] = 0.0

    if max_steps is None:
        max_steps = 20 * max(grid.dims) ** 2
    T, steps, _ = _jacobi_relax(T, update, max_steps, tol)
    return TemperatureField(grid, T, update, inside, phi, steps)


def grad_T(temperature: TemperatureField, y) -> np.ndarray:
    """Interpolated temperature gradient at a point of the free region."""
    y = np.asarray(y, dtype=float)
    grid = temperature.grid
    if np.any(y < grid.bbox_min) or np.any(y > grid.bbox_max):
        raise ValueError(f"point {y} lies outside the bounding box")
    if sample_field(temperature.phi_plus, grid, y) < -1e-9:
        raise ValueError(f"point {y} lies inside the offset shape")
    return sample_gradient(temperature.gradients(), grid, y)

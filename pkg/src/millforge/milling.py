"""Millability filter: per-sample tool/head accessibility testing.

A surface point is accessible from approach direction m when the ball-nose
bit (radius `bit_radius`, length `bit_length`) touching the point and the
head stack behind it (radius `head_radius`, extending to infinity) can be
placed without intersecting the part.  Both checks reduce to ray casts
against offset isosurfaces of the part's signed distance field.

The filter value eta of a sample is the best alignment |m . n| over the
accessible directions, zero when none is accessible.  Growth gating
(zeroing eta where the optimizer wants to grow) is applied by the caller,
not here, so the relaxed update scheme can reuse the raw accessibility.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np
from numba import njit

from .grid import gradient_field, trilinear
from .heat import TemperatureField
from .levelset import LevelSet, SurfaceSamples, _march_ray

# mill-test outcome codes shared between the numba kernels and the wrappers
_OK, _GATE, _BIT, _HEAD = 0, 1, 2, 3
_STAGE_NAMES = {_OK: "ok", _GATE: "gate", _BIT: "bit", _HEAD: "head"}


@dataclass(frozen=True)
class ToolModel:
    """Ball-nose bit plus cylindrical head stack, all dimensions in mm."""

    bit_radius: float
    bit_length: float
    head_radius: float

    def __post_init__(self):
        if not 0.0 < self.bit_radius <= self.head_radius:
            raise ValueError(
                f"need 0 < bit_radius <= head_radius, got {self.bit_radius}, {self.head_radius}"
            )
        if self.bit_length <= 0.0:
            raise ValueError(f"bit_length must be positive, got {self.bit_length}")

    def band_requirement(self, h: float) -> float:
        """Band width needed so the head isosurface exists on the grid."""
        return self.head_radius + 2.0 * h


@dataclass(frozen=True)
class DirectionSet:
    """Unit milling approach directions (tool moves along m toward the surface)."""

    directions: np.ndarray

    def __post_init__(self):
        d = np.atleast_2d(np.asarray(self.directions, dtype=np.float64))
        if d.shape[0] == 0 or d.shape[1] != 3:
            raise ValueError("direction set must contain at least one 3-vector")
        norms = np.linalg.norm(d, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("milling directions must be unit vectors")
        object.__setattr__(self, "directions", np.ascontiguousarray(d))

    def __len__(self):
        return self.directions.shape[0]


def hemisphere_directions() -> DirectionSet:
    """The fixed 26-direction set: cube face centers, edge midpoints, corners."""
    vecs = [v for v in product((-1, 0, 1), repeat=3) if v != (0, 0, 0)]
    vecs.sort(key=lambda v: (np.abs(v).sum(), v))  # faces, then edges, then corners
    d = np.asarray(vecs, dtype=np.float64)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return DirectionSet(d)


@dataclass
class MillTestResult:
    accessible: bool
    eta_candidate: float
    x_hit: np.ndarray | None
    stage: str  # "ok" | "gate" | "bit" | "head"


@dataclass
class FilterField:
    """Per-sample accessibility: eta in [0, 1] and the direction achieving it."""

    eta: np.ndarray
    best_directions: np.ndarray  # NaN rows where eta == 0
    iterations: np.ndarray | None = None

    def __len__(self):
        return self.eta.shape[0]


# ------------------------------------------------------------------
# kernels
# ------------------------------------------------------------------

@njit(cache=True)
def _mill_test(values, ox, oy, oz, h,
               px, py, pz, nx_, ny_, nz_, mx, my, mz,
               rb, lb, rh, tan_tol):
    """Single accessibility test. Returns (code, eta, hx, hy, hz).

    The first sphere-trace step is taken before testing the sign so that
    the exactly-tangent contact configuration (phi(p) == rb) does not
    register as a hit; overlaps deeper than `tan_tol` still do.
    """
    ndotm = nx_ * mx + ny_ * my + nz_ * mz
    if ndotm >= 0.0:
        return _GATE, 0.0, 0.0, 0.0, 0.0
    # bit shaft: ray from the cap center against the rb isosurface, limited
    # to the bit length (the head test covers everything behind it)
    d0 = trilinear(values, ox, oy, oz, h, px, py, pz) - rb
    if d0 < -tan_tol:
        return _BIT, 0.0, px, py, pz
    s0 = d0 if d0 > 0.25 * h else 0.25 * h
    bx = px - mx * s0
    by = py - my * s0
    bz = pz - mz * s0
    if s0 < lb:
        t = _march_ray(values, ox, oy, oz, h, bx, by, bz,
                       -mx, -my, -mz, rb, lb - s0)
        if t >= 0.0:
            return _BIT, 0.0, bx - mx * t, by - my * t, bz - mz * t
    # head: same ray shifted back by bit length + head radius, rh isosurface
    qx = px - mx * (lb + rh)
    qy = py - my * (lb + rh)
    qz = pz - mz * (lb + rh)
    d0h = trilinear(values, ox, oy, oz, h, qx, qy, qz) - rh
    if d0h < -tan_tol:
        return _HEAD, 0.0, qx, qy, qz
    s0h = d0h if d0h > 0.25 * h else 0.25 * h
    hx = qx - mx * s0h
    hy = qy - my * s0h
    hz = qz - mz * s0h
    t = _march_ray(values, ox, oy, oz, h, hx, hy, hz, -mx, -my, -mz, rh, BIG_T)
    if t >= 0.0:
        return _HEAD, 0.0, hx - mx * t, hy - my * t, hz - mz * t
    return _OK, -ndotm, 0.0, 0.0, 0.0


BIG_T = 1.0e30


@njit(cache=True)
def _filter_direction_set(values, ox, oy, oz, h, pos, nrm, dirs, rb, lb, rh, tan_tol):
    ns = pos.shape[0]
    nm = dirs.shape[0]
    eta = np.zeros(ns)
    best = np.full((ns, 3), np.nan)
    for s in range(ns):
        x0, y0, z0 = pos[s, 0], pos[s, 1], pos[s, 2]
        nx_, ny_, nz_ = nrm[s, 0], nrm[s, 1], nrm[s, 2]
        px = x0 + nx_ * rb
        py = y0 + ny_ * rb
        pz = z0 + nz_ * rb
        for d in range(nm):
            mx, my, mz = dirs[d, 0], dirs[d, 1], dirs[d, 2]
            code, e, _, _, _ = _mill_test(values, ox, oy, oz, h,
                                          px, py, pz, nx_, ny_, nz_,
                                          mx, my, mz, rb, lb, rh, tan_tol)
            if code == _OK and e > eta[s]:
                eta[s] = e
                best[s, 0] = mx
                best[s, 1] = my
                best[s, 2] = mz
    return eta, best


@njit(cache=True)
def _normal_search_kernel(values, gx, gy, gz, ox, oy, oz, h,
                          pos, nrm, rb, lb, rh, gamma, max_iters, tan_tol):
    ns = pos.shape[0]
    eta = np.zeros(ns)
    best = np.full((ns, 3), np.nan)
    iters = np.zeros(ns, np.int64)
    max_walk = int(gamma / h) + 1
    for s in range(ns):
        x0, y0, z0 = pos[s, 0], pos[s, 1], pos[s, 2]
        nx_, ny_, nz_ = nrm[s, 0], nrm[s, 1], nrm[s, 2]
        px = x0 + nx_ * rb
        py = y0 + ny_ * rb
        pz = z0 + nz_ * rb
        mx, my, mz = -nx_, -ny_, -nz_
        for it in range(max_iters):
            iters[s] = it + 1
            code, e, hx, hy, hz = _mill_test(values, ox, oy, oz, h,
                                             px, py, pz, nx_, ny_, nz_,
                                             mx, my, mz, rb, lb, rh, tan_tol)
            if code == _OK:
                eta[s] = e
                best[s, 0] = mx
                best[s, 1] = my
                best[s, 2] = mz
                break
            if code == _GATE:
                break  # no hit point to walk from
            # climb the distance field from the hit point until it peaks
            # (medial axis) or plateaus (band periphery)
            yx, yy, yz = hx, hy, hz
            fprev = trilinear(values, ox, oy, oz, h, yx, yy, yz)
            for _ in range(max_walk):
                ggx = trilinear(gx, ox, oy, oz, h, yx, yy, yz)
                ggy = trilinear(gy, ox, oy, oz, h, yx, yy, yz)
                ggz = trilinear(gz, ox, oy, oz, h, yx, yy, yz)
                gn = (ggx * ggx + ggy * ggy + ggz * ggz) ** 0.5
                if gn < 1e-12:
                    break
                tx = yx + h * ggx / gn
                ty = yy + h * ggy / gn
                tz = yz + h * ggz / gn
                fnew = trilinear(values, ox, oy, oz, h, tx, ty, tz)
                if fnew - fprev < 1e-3 * h:
                    break
                yx, yy, yz = tx, ty, tz
                fprev = fnew
            dx = px - yx
            dy = py - yy
            dz = pz - yz
            dn = (dx * dx + dy * dy + dz * dz) ** 0.5
            if dn < 1e-9:
                break
            mx, my, mz = dx / dn, dy / dn, dz / dn
    return eta, best, iters


@njit(cache=True)
def _heat_search_kernel(values, ox, oy, oz, h, tgx, tgy, tgz,
                        pos, nrm, rb, lb, rh, eps_t, max_iters, tan_tol):
    ns = pos.shape[0]
    eta = np.zeros(ns)
    best = np.full((ns, 3), np.nan)
    iters = np.zeros(ns, np.int64)
    for s in range(ns):
        x0, y0, z0 = pos[s, 0], pos[s, 1], pos[s, 2]
        nx_, ny_, nz_ = nrm[s, 0], nrm[s, 1], nrm[s, 2]
        px = x0 + nx_ * rb
        py = y0 + ny_ * rb
        pz = z0 + nz_ * rb
        # seed one cell off the offset surface: the zero-Dirichlet skin of T
        # has no usable gradient
        yx = px + nx_ * h
        yy = py + ny_ * h
        yz = pz + nz_ * h
        mx, my, mz = -nx_, -ny_, -nz_
        for it in range(max_iters):
            iters[s] = it + 1
            code, e, _, _, _ = _mill_test(values, ox, oy, oz, h,
                                          px, py, pz, nx_, ny_, nz_,
                                          mx, my, mz, rb, lb, rh, tan_tol)
            if code == _OK:
                eta[s] = e
                best[s, 0] = mx
                best[s, 1] = my
                best[s, 2] = mz
                break
            gx_ = trilinear(tgx, ox, oy, oz, h, yx, yy, yz)
            gy_ = trilinear(tgy, ox, oy, oz, h, yx, yy, yz)
            gz_ = trilinear(tgz, ox, oy, oz, h, yx, yy, yz)
            gn = (gx_ * gx_ + gy_ * gy_ + gz_ * gz_) ** 0.5
            if gn < 1e-9:
                break  # stagnated
            yx += eps_t * gx_ / gn
            yy += eps_t * gy_ / gn
            yz += eps_t * gz_ / gn
            gx_ = trilinear(tgx, ox, oy, oz, h, yx, yy, yz)
            gy_ = trilinear(tgy, ox, oy, oz, h, yx, yy, yz)
            gz_ = trilinear(tgz, ox, oy, oz, h, yx, yy, yz)
            gn = (gx_ * gx_ + gy_ * gy_ + gz_ * gz_) ** 0.5
            if gn < 1e-9:
                break
            mx, my, mz = -gx_ / gn, -gy_ / gn, -gz_ / gn
    return eta, best, iters


# ------------------------------------------------------------------
# public operations
# ------------------------------------------------------------------

def _prepared(omega: LevelSet, tool: ToolModel) -> LevelSet:
    return omega.ensure_band(max(omega.band_width, tool.band_requirement(omega.h)))


def milling_test(omega: LevelSet, n, p, m, tool: ToolModel,
                 tangency_tol: float | None = None) -> MillTestResult:
    """Test one approach direction at one contact configuration.

    `p` is the bit cap-sphere center (surface point + n * bit_radius).
    Directions with n . m >= 0 are rejected outright; otherwise the bit and
    head rays are cast and accessibility requires both to miss.
    """
    omega = _prepared(omega, tool)
    tol = 0.25 * omega.h if tangency_tol is None else float(tangency_tol)
    n = np.asarray(n, dtype=float)
    p = np.asarray(p, dtype=float)
    m = np.asarray(m, dtype=float)
    ox, oy, oz = omega.grid.origin
    code, e, hx, hy, hz = _mill_test(
        omega.values, ox, oy, oz, omega.h,
        p[0], p[1], p[2], n[0], n[1], n[2], m[0], m[1], m[2],
        tool.bit_radius, tool.bit_length, tool.head_radius, tol,
    )
    hit = np.array([hx, hy, hz]) if code in (_BIT, _HEAD) else None
    return MillTestResult(code == _OK, e, hit, _STAGE_NAMES[code])


def filter_3axis(omega: LevelSet, samples: SurfaceSamples, directions: DirectionSet,
                 tool: ToolModel, tangency_tol: float | None = None) -> FilterField:
    """eta = max |m . n| over the accessible fixed directions (0 if none).

    Ties keep the lowest-index direction; the band is widened to cover the
    head-radius isosurface before testing.
    """
    omega = _prepared(omega, tool)
    tol = 0.25 * omega.h if tangency_tol is None else float(tangency_tol)
    ox, oy, oz = omega.grid.origin
    eta, best = _filter_direction_set(
        omega.values, ox, oy, oz, omega.h,
        samples.positions, samples.normals, directions.directions,
        tool.bit_radius, tool.bit_length, tool.head_radius, tol,
    )
    return FilterField(eta, best)


def filter_5axis_hemisphere(omega: LevelSet, samples: SurfaceSamples, tool: ToolModel,
                            tangency_tol: float | None = None) -> FilterField:
    """3-axis filter over the fixed 26-direction sphere sampling."""
    return filter_3axis(omega, samples, hemisphere_directions(), tool, tangency_tol)


def filter_5axis_normal_search(omega: LevelSet, samples: SurfaceSamples, tool: ToolModel,
                               max_iters: int = 8,
                               tangency_tol: float | None = None) -> FilterField:
    """Local 5-axis search guided by the distance field.

    Starts at m = -n; after a failed test, walks from the hit point up
    grad(phi) to the medial axis or band periphery and retries with the
    direction from there back to the cap center.  May miss accessible
    directions in re-entrant geometry.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be at least 1")
    omega = _prepared(omega, tool)
    tol = 0.25 * omega.h if tangency_tol is None else float(tangency_tol)
    gx, gy, gz = omega.gradients()
    ox, oy, oz = omega.grid.origin
    eta, best, iters = _normal_search_kernel(
        omega.values, np.ascontiguousarray(gx), np.ascontiguousarray(gy),
        np.ascontiguousarray(gz), ox, oy, oz, omega.h,
        samples.positions, samples.normals,
        tool.bit_radius, tool.bit_length, tool.head_radius,
        omega.band_width, max_iters, tol,
    )
    return FilterField(eta, best, iters)


def filter_5axis_heat_search(omega: LevelSet, samples: SurfaceSamples, tool: ToolModel,
                             temperature: TemperatureField, max_iters: int = 8,
                             step: float | None = None,
                             tangency_tol: float | None = None) -> FilterField:
    """5-axis search following the steady-state heat flow away from the part.

    The trajectory point climbs grad(T) (temperature solved between the
    bit-radius offset surface and the bounding box); candidate approach
    directions point back down the gradient toward the part.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be at least 1")
    omega = _prepared(omega, tool)
    tol = 0.25 * omega.h if tangency_tol is None else float(tangency_tol)
    if temperature.grid != omega.grid:
        raise ValueError("temperature field must live on the part's grid")
    eps_t = omega.h if step is None else float(step)
    tgx, tgy, tgz = temperature.gradients()
    ox, oy, oz = omega.grid.origin
    eta, best, iters = _heat_search_kernel(
        omega.values, ox, oy, oz, omega.h, tgx, tgy, tgz,
        samples.positions, samples.normals,
        tool.bit_radius, tool.bit_length, tool.head_radius,
        eps_t, max_iters, tol,
    )
    return FilterField(eta, best, iters)

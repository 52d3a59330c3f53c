"""Narrow-band signed-distance representation of the shape.

The shape is the region where phi < 0 on a uniform node grid.  phi is kept a
signed distance (|grad phi| = 1) inside a band of width `band_width` around
the zero set and clamped to +-band_width outside it.  Every mutating
operation returns a fresh, redistanced LevelSet.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.spatial import cKDTree

from .errors import EmptyShapeError
from .grid import GridSpec, gradient_field, sample_field, sample_gradient, trilinear

BIG = 1.0e30


# ------------------------------------------------------------------
# fast-sweeping redistance
# ------------------------------------------------------------------

@njit(cache=True)
def _interface_init(phi, h):
    """Freeze nodes next to the zero set with a first-order distance estimate."""
    nx, ny, nz = phi.shape
    d = np.full((nx, ny, nz), BIG)
    frozen = np.zeros((nx, ny, nz), np.bool_)
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                p = phi[i, j, k]
                if p == 0.0:
                    d[i, j, k] = 0.0
                    frozen[i, j, k] = True
                    continue
                theta_min = BIG
                for axis in range(3):
                    for s in (-1, 1):
                        ii, jj, kk = i, j, k
                        if axis == 0:
                            ii += s
                        elif axis == 1:
                            jj += s
                        else:
                            kk += s
                        if ii < 0 or ii >= nx or jj < 0 or jj >= ny or kk < 0 or kk >= nz:
                            continue
                        q = phi[ii, jj, kk]
                        if p * q < 0.0 or q == 0.0:
                            th = abs(p) / (abs(p) + abs(q)) if q != 0.0 else 1.0
                            if th < theta_min:
                                theta_min = th
                if theta_min < BIG:
                    # |phi| / |grad phi| keeps the zero crossing in place for
                    # fields that are already (scaled) distance functions
                    im = i - 1 if i > 0 else i
                    ip = i + 1 if i < nx - 1 else i
                    jm = j - 1 if j > 0 else j
                    jp = j + 1 if j < ny - 1 else j
                    km = k - 1 if k > 0 else k
                    kp = k + 1 if k < nz - 1 else k
                    gx = (phi[ip, j, k] - phi[im, j, k]) / ((ip - im) * h)
                    gy = (phi[i, jp, k] - phi[i, jm, k]) / ((jp - jm) * h)
                    gz = (phi[i, j, kp] - phi[i, j, km]) / ((kp - km) * h)
                    gnorm = (gx * gx + gy * gy + gz * gz) ** 0.5
                    if gnorm < 0.2:
                        gnorm = 0.2
                    est = abs(p) / gnorm
                    cap = theta_min * h
                    if est > cap:
                        est = cap
                    d[i, j, k] = est
                    frozen[i, j, k] = True
    return d, frozen


@njit(cache=True)
def _fsm_sweeps(d, frozen, h, n_passes):
    """Gauss-Seidel sweeps of the eikonal |grad d| = 1 in all 8 orderings."""
    nx, ny, nz = d.shape
    for _ in range(n_passes):
        for sx in range(2):
            for sy in range(2):
                for sz in range(2):
                    ib, ie, istep = (0, nx, 1) if sx == 0 else (nx - 1, -1, -1)
                    jb, je, jstep = (0, ny, 1) if sy == 0 else (ny - 1, -1, -1)
                    kb, ke, kstep = (0, nz, 1) if sz == 0 else (nz - 1, -1, -1)
                    for i in range(ib, ie, istep):
                        for j in range(jb, je, jstep):
                            for k in range(kb, ke, kstep):
                                if frozen[i, j, k]:
                                    continue
                                a = BIG
                                if i > 0 and d[i - 1, j, k] < a:
                                    a = d[i - 1, j, k]
                                if i < nx - 1 and d[i + 1, j, k] < a:
                                    a = d[i + 1, j, k]
                                b = BIG
                                if j > 0 and d[i, j - 1, k] < b:
                                    b = d[i, j - 1, k]
                                if j < ny - 1 and d[i, j + 1, k] < b:
                                    b = d[i, j + 1, k]
                                c = BIG
                                if k > 0 and d[i, j, k - 1] < c:
                                    c = d[i, j, k - 1]
                                if k < nz - 1 and d[i, j, k + 1] < c:
                                    c = d[i, j, k + 1]
                                if a > b:
                                    a, b = b, a
                                if b > c:
                                    b, c = c, b
                                if a > b:
                                    a, b = b, a
                                if a >= BIG:
                                    continue
                                x = a + h
                                if x > b:
                                    x = 0.5 * (a + b + (2.0 * h * h - (a - b) ** 2) ** 0.5)
                                    if x > c:
                                        s = a + b + c
                                        disc = s * s - 3.0 * (a * a + b * b + c * c - h * h)
                                        if disc > 0.0:
                                            x = (s + disc ** 0.5) / 3.0
                                if x < d[i, j, k]:
                                    d[i, j, k] = x


# ------------------------------------------------------------------
# upwind Hamilton-Jacobi advection
# ------------------------------------------------------------------

@njit(cache=True)
def _upwind_substep(phi, speed, dt, h, out):
    """One Godunov upwind step of phi_t + v |grad phi| = 0."""
    nx, ny, nz = phi.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                v = speed[i, j, k]
                p = phi[i, j, k]
                if v == 0.0:
                    out[i, j, k] = p
                    continue
                dmx = (p - phi[i - 1, j, k]) / h if i > 0 else 0.0
                dpx = (phi[i + 1, j, k] - p) / h if i < nx - 1 else 0.0
                dmy = (p - phi[i, j - 1, k]) / h if j > 0 else 0.0
                dpy = (phi[i, j + 1, k] - p) / h if j < ny - 1 else 0.0
                dmz = (p - phi[i, j, k - 1]) / h if k > 0 else 0.0
                dpz = (phi[i, j, k + 1] - p) / h if k < nz - 1 else 0.0
                if v > 0.0:
                    g2 = (
                        max(dmx, 0.0) ** 2 + min(dpx, 0.0) ** 2
                        + max(dmy, 0.0) ** 2 + min(dpy, 0.0) ** 2
                        + max(dmz, 0.0) ** 2 + min(dpz, 0.0) ** 2
                    )
                else:
                    g2 = (
                        min(dmx, 0.0) ** 2 + max(dpx, 0.0) ** 2
                        + min(dmy, 0.0) ** 2 + max(dpy, 0.0) ** 2
                        + min(dmz, 0.0) ** 2 + max(dpz, 0.0) ** 2
                    )
                out[i, j, k] = p - dt * v * g2 ** 0.5


# ------------------------------------------------------------------
# sphere-traced ray cast
# ------------------------------------------------------------------

@njit(cache=True)
def _march_ray(values, ox, oy, oz, h, sx, sy, sz, dx, dy, dz, iso, tmax):
    """Distance along the ray to the first phi = iso crossing, or -1.0.

    Steps by max(phi - iso, h/4) and refines crossings by bisection, so it
    cannot tunnel through the isosurface of a valid signed distance field.
    """
    nx, ny, nz = values.shape
    lo0, lo1, lo2 = ox, oy, oz
    hi0 = ox + h * (nx - 1)
    hi1 = oy + h * (ny - 1)
    hi2 = oz + h * (nz - 1)
    t0 = 0.0
    t1 = tmax
    for axis in range(3):
        s = sx if axis == 0 else (sy if axis == 1 else sz)
        dd = dx if axis == 0 else (dy if axis == 1 else dz)
        lo = lo0 if axis == 0 else (lo1 if axis == 1 else lo2)
        hi = hi0 if axis == 0 else (hi1 if axis == 1 else hi2)
        if abs(dd) < 1e-14:
            if s < lo or s > hi:
                return -1.0
        else:
            ta = (lo - s) / dd
            tb = (hi - s) / dd
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
    if t1 < t0:
        return -1.0
    t = t0
    f_prev = trilinear(values, ox, oy, oz, h, sx + dx * t, sy + dy * t, sz + dz * t) - iso
    if f_prev < 0.0:
        return t
    min_step = 0.25 * h
    for _ in range(1000000):
        step = f_prev if f_prev > min_step else min_step
        tn = t + step
        last = False
        if tn >= t1:
            tn = t1
            last = True
        f = trilinear(values, ox, oy, oz, h, sx + dx * tn, sy + dy * tn, sz + dz * tn) - iso
        if f < 0.0:
            a, b = t, tn
            for _ in range(40):
                m = 0.5 * (a + b)
                fm = trilinear(values, ox, oy, oz, h, sx + dx * m, sy + dy * m, sz + dz * m) - iso
                if fm < 0.0:
                    b = m
                else:
                    a = m
            return 0.5 * (a + b)
        if last:
            return -1.0
        t = tn
        f_prev = f
    return -1.0


# ------------------------------------------------------------------
# public level-set type and operations
# ------------------------------------------------------------------

@dataclass
class SurfaceSamples:
    """Boundary point cloud: projected positions, outward unit normals, and
    the flat index of the grid node each sample came from."""

    positions: np.ndarray
    normals: np.ndarray
    node_indices: np.ndarray

    def __len__(self):
        return self.positions.shape[0]


@dataclass
class LevelSet:
    grid: GridSpec
    values: np.ndarray
    band_width: float
    _grads: tuple | None = field(default=None, repr=False, compare=False)

    @classmethod
    def from_sdf(cls, grid: GridSpec, values: np.ndarray, band_width: float | None = None,
                 redistance: bool = True) -> "LevelSet":
        """Wrap a raw scalar field; redistances unless told otherwise."""
        if band_width is None:
            band_width = 4.0 * grid.spacing
        band_width = max(float(band_width), 3.0 * grid.spacing)
        ls = cls(grid, np.ascontiguousarray(values, dtype=np.float64), band_width)
        return ls.redistance() if redistance else ls

    # -- basic views ------------------------------------------------

    @property
    def h(self) -> float:
        return self.grid.spacing

    def band_mask(self) -> np.ndarray:
        return np.abs(self.values) < self.band_width - 1e-9

    def copy(self) -> "LevelSet":
        return LevelSet(self.grid, self.values.copy(), self.band_width)

    def gradients(self):
        if self._grads is None:
            self._grads = gradient_field(self.values, self.grid)
        return self._grads

    def sample(self, points):
        """Trilinear phi at world points."""
        return sample_field(self.values, self.grid, points)

    def sample_normal(self, points):
        """Unit grad(phi) at world points."""
        g = np.atleast_2d(sample_gradient(self.gradients(), self.grid, points))
        norms = np.linalg.norm(g, axis=1, keepdims=True)
        g = g / np.maximum(norms, 1e-12)
        return g if np.asarray(points).ndim > 1 else g[0]

    # -- redistance / band ------------------------------------------

    def redistance(self, band_width: float | None = None) -> "LevelSet":
        """Rebuild phi as a true signed distance clamped at the band width."""
        gamma = float(band_width) if band_width is not None else self.band_width
        phi = self.values
        neg = phi < 0.0
        if not neg.any():
            raise EmptyShapeError("level set has no interior: shape is empty")
        if neg.all():
            raise EmptyShapeError("level set has no exterior: no zero crossing")
        d, frozen = _interface_init(phi, self.h)
        _fsm_sweeps(d, frozen, self.h, 3)
        out = np.where(neg, -d, d)
        np.clip(out, -gamma, gamma, out=out)
        return LevelSet(self.grid, out, gamma)

    def ensure_band(self, band_width: float) -> "LevelSet":
        """Widen the band (e.g. so offset isosurfaces up to the head radius exist)."""
        if band_width <= self.band_width:
            return self
        return self.redistance(band_width)

    # -- morphology --------------------------------------------------

    def offset(self, o: float) -> "LevelSet":
        """Move the boundary outward by o (inward for negative o).

        The new interface is seeded from exact distances to the sampled
        current surface: sweeping phi - o alone underestimates depths where
        inward characteristics focus (inside corners), which would misplace
        insets.  The offset surface must stay inside the grid; pad the grid
        by at least the largest offset used (the CLI does this).

        """
        if abs(o) >= self.band_width:
            raise ValueError(
                f"offset {o} exceeds band width {self.band_width}; widen the band first"
            )
        if o == 0.0:
            return self.copy()
        shifted = self.values - o
        samples = self.sample_boundary()
        if len(samples):
            shell = np.abs(shifted) <= 2.0 * self.h + 1e-12
            idx = np.argwhere(shell)
            if idx.shape[0]:
                pos = self.grid.bbox_min + idx * self.h
                d, _ = cKDTree(samples.positions).query(pos, k=1)
                signed = np.where(self.values[shell] < 0.0, -d, d)
                shifted[shell] = signed - o
        return LevelSet(self.grid, shifted, self.band_width).redistance()

    def close(self, o: float) -> "LevelSet":
        """Morphological closing: fills concave features of radius below o."""
        if not 0.0 < o < self.band_width:
            raise ValueError(f"closing radius must lie in (0, band_width), got {o}")
        return self.offset(o).offset(-o)

    def union(self, other: "LevelSet") -> "LevelSet":
        if other.grid != self.grid:
            raise ValueError("union requires level sets on the same grid")
        merged = np.minimum(self.values, other.values)
        return LevelSet(self.grid, merged, max(self.band_width, other.band_width)).redistance()

    def mirror(self, axis: int, coordinate: float) -> "LevelSet":
        """Symmetrize across an axis-aligned plane lying on a grid plane.

        phi <- min(phi, phi o reflection), i.e. the union of the shape with
        its mirror image.
        """
        h = self.h
        idx = (coordinate - self.grid.origin[axis]) / h
        ip = int(round(idx))
        if abs(idx - ip) > 1e-6 or not 0 <= ip < self.grid.dims[axis]:
            raise ValueError(f"mirror plane must lie on a grid plane, got {coordinate}")
        n = self.grid.dims[axis]
        src = np.arange(n)
        refl = 2 * ip - src
        valid = (refl >= 0) & (refl < n)
        merged = self.values.copy()
        take_src = src[valid]
        take_ref = refl[valid]
        sl_dst = [slice(None)] * 3
        sl_src = [slice(None)] * 3
        sl_dst[axis] = take_src
        sl_src[axis] = take_ref
        merged[tuple(sl_dst)] = np.minimum(
            merged[tuple(sl_dst)], self.values[tuple(sl_src)]
        )
        return LevelSet(self.grid, merged, self.band_width).redistance()

    # -- integration --------------------------------------------------

    def occupancy(self) -> np.ndarray:
        """Per-cell solid fraction from a linear ramp of the node values."""
        chi = np.clip(0.5 - self.values / self.h, 0.0, 1.0)
        frac = (
            chi[:-1, :-1, :-1] + chi[1:, :-1, :-1] + chi[:-1, 1:, :-1] + chi[1:, 1:, :-1]
            + chi[:-1, :-1, 1:] + chi[1:, :-1, 1:] + chi[:-1, 1:, 1:] + chi[1:, 1:, 1:]
        ) / 8.0
        return frac

    def volume(self) -> float:
        return float(self.occupancy().sum() * self.grid.cell_volume)

    # -- advection -----------------------------------------------------

    def advect(self, speed: np.ndarray, t: float) -> "LevelSet":
        """Integrate phi_t + v |grad phi| = 0 for pseudo-time t, then redistance.

        `speed` is a node field (normal-extended on the band, zero elsewhere).
        Positive speed grows the shape.
        """
        if t < 0.0:
            raise ValueError("advection time must be non-negative")
        speed = np.ascontiguousarray(speed, dtype=np.float64)
        if speed.shape != self.values.shape:
            raise ValueError("speed field shape does not match the grid")
        if not np.all(np.isfinite(speed)):
            raise ValueError("speed field contains non-finite values")
        vmax = float(np.max(np.abs(speed)))
        if vmax == 0.0 or t == 0.0:
            return self.copy()
        dt_cfl = 0.5 * self.h / vmax
        phi = self.values.copy()
        out = np.empty_like(phi)
        remaining = float(t)
        moved = 0.0
        while remaining > 1e-15:
            dt = min(dt_cfl, remaining)
            _upwind_substep(phi, speed, dt, self.h, out)
            phi, out = out, phi
            remaining -= dt
            moved += vmax * dt
            if moved > 0.5 * self.band_width and remaining > 1e-15:
                phi = LevelSet(self.grid, phi, self.band_width).redistance().values
                moved = 0.0
        return LevelSet(self.grid, phi, self.band_width).redistance()

    # -- boundary sampling ----------------------------------------------

    def sample_boundary(self) -> SurfaceSamples:
        """Project near-boundary nodes onto the zero set.

        Nodes with |phi| <= h/2 are moved twice by x <- x - phi(x) n(x);
        near-duplicates (closer than h/4) are merged keeping the first in
        node order.
        """
        h = self.h
        phi = self.values
        cand = np.abs(phi) <= 0.5 * h + 1e-12
        idx = np.argwhere(cand)
        if idx.shape[0] == 0:
            return SurfaceSamples(
                np.empty((0, 3)), np.empty((0, 3)), np.empty(0, dtype=np.int64)
            )
        pos = self.grid.bbox_min + idx * h
        grads = self.gradients()
        for _ in range(2):
            g = sample_gradient(grads, self.grid, pos)
            norm = np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
            pos = pos - self.sample(pos)[:, None] * g / norm
        g = sample_gradient(grads, self.grid, pos)
        norms = np.linalg.norm(g, axis=1)
        ok = norms > 1e-9
        idx, pos, g, norms = idx[ok], pos[ok], g[ok], norms[ok]
        normals = g / norms[:, None]

        tree = cKDTree(pos)
        pairs = tree.query_pairs(r=0.25 * h, output_type="ndarray")
        keep = np.ones(pos.shape[0], dtype=bool)
        if pairs.size:
            order = np.argsort(pairs[:, 0], kind="stable")
            for a, b in pairs[order]:
                if keep[a] and keep[b]:
                    keep[max(a, b)] = False
        nx, ny, nz = self.grid.dims
        flat = (idx[:, 0] * ny + idx[:, 1]) * nz + idx[:, 2]
        return SurfaceSamples(
            np.ascontiguousarray(pos[keep]),
            np.ascontiguousarray(normals[keep]),
            flat[keep].astype(np.int64),
        )

    def extend_normal(self, samples: SurfaceSamples, boundary_values: np.ndarray) -> np.ndarray:
        """Spread per-sample scalars to the whole band, constant along normals.

        Each band node takes the value of the sample nearest to its
        closest-point projection x - phi(x) n(x).  Nodes outside the band
        get zero.
        """
        boundary_values = np.asarray(boundary_values, dtype=np.float64)
        if boundary_values.shape[0] != len(samples):
            raise ValueError("one boundary value per surface sample required")
        if not np.all(np.isfinite(boundary_values)):
            raise ValueError("boundary values must be finite")
        out = np.zeros_like(self.values)
        if len(samples) == 0:
            return out
        mask = self.band_mask()
        idx = np.argwhere(mask)
        pos = self.grid.bbox_min + idx * self.h
        g = sample_gradient(self.gradients(), self.grid, pos)
        norm = np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
        proj = pos - self.sample(pos)[:, None] * g / norm
        tree = cKDTree(samples.positions)
        _, nearest = tree.query(proj, k=1)
        out[mask] = boundary_values[nearest]
        return out

    # -- ray casting ------------------------------------------------------

    def raycast(self, start, direction, iso: float = 0.0, max_dist: float | None = None):
        """First point along the ray where phi = iso, or None.

        Sphere tracing with bisection refinement; a ray that exits the
        bounding box (or exceeds max_dist) without crossing yields None.
        """
        d = np.asarray(direction, dtype=float)
        nd = np.linalg.norm(d)
        if abs(nd - 1.0) > 1e-6:
            raise ValueError("ray direction must be a unit vector")
        if abs(iso) >= self.band_width:
            raise ValueError(f"isovalue {iso} outside the band (width {self.band_width})")
        s = np.asarray(start, dtype=float)
        tmax = float(max_dist) if max_dist is not None else BIG
        ox, oy, oz = self.grid.origin
        t = _march_ray(
            self.values, ox, oy, oz, self.h,
            s[0], s[1], s[2], d[0], d[1], d[2], float(iso), tmax,
        )
        if t < 0.0:
            return None
        return s + d * t

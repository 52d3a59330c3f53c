"""File formats: binary level-set grids (.lsg), ASCII STL, STL voxelization.

Grid file layout (little-endian): 16-byte magic "MILLFORGE-LSG v1", then
3 x f64 origin, f64 spacing, 3 x u32 dims, then dims_x*dims_y*dims_z f32
node values with x varying fastest.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from numba import njit
from skimage.measure import marching_cubes

from .grid import GridSpec
from .levelset import LevelSet

MAGIC = b"MILLFORGE-LSG v1"
assert len(MAGIC) == 16


def write_grid_file(path, source, values: np.ndarray | None = None) -> None:
    """Write a LevelSet (or any node field given a GridSpec) to a .lsg file."""
    if values is None:
        grid, values = source.grid, source.values
    else:
        grid = source
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<3d", *grid.origin))
        fh.write(struct.pack("<d", grid.spacing))
        fh.write(struct.pack("<3I", *grid.dims))
        fh.write(np.asarray(values, dtype="<f4").ravel(order="F").tobytes())


def read_grid_file(path) -> LevelSet:
    """Read a .lsg file; values are kept verbatim (no redistancing)."""
    with open(path, "rb") as fh:
        magic = fh.read(16)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a millforge level-set grid file")
        origin = struct.unpack("<3d", fh.read(24))
        spacing = struct.unpack("<d", fh.read(8))[0]
        dims = struct.unpack("<3I", fh.read(12))
        n = dims[0] * dims[1] * dims[2]
        raw = np.frombuffer(fh.read(4 * n), dtype="<f4")
        if raw.size != n:
            raise ValueError(f"{path}: truncated grid file")
    grid = GridSpec(origin, spacing, dims)
    values = raw.astype(np.float64).reshape(dims, order="F")
    band = max(float(np.abs(values).max()), 3.0 * spacing)
    return LevelSet(grid, np.ascontiguousarray(values), band)


# ------------------------------------------------------------------
# STL
# ------------------------------------------------------------------

def extract_surface(ls: LevelSet):
    """Marching-cubes triangulation of the zero set: (vertices, faces)."""
    h = ls.grid.spacing
    verts, faces, _, _ = marching_cubes(ls.values, level=0.0, spacing=(h, h, h))
    return verts + ls.grid.bbox_min, faces


def write_stl(path, vertices: np.ndarray, faces: np.ndarray, name: str = "millforge") -> None:
    """ASCII STL with per-facet normals from the triangle winding."""
    v = vertices[faces]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    norms = np.linalg.norm(n, axis=1, keepdims=True)
    n = np.divide(n, norms, out=np.zeros_like(n), where=norms > 0)
    with open(path, "w") as fh:
        fh.write(f"solid {name}\n")
        for tri, nn in zip(v, n):
            fh.write(f"  facet normal {nn[0]:.6e} {nn[1]:.6e} {nn[2]:.6e}\n")
            fh.write("    outer loop\n")
            for p in tri:
                fh.write(f"      vertex {p[0]:.6e} {p[1]:.6e} {p[2]:.6e}\n")
            fh.write("    endloop\n")
            fh.write("  endfacet\n")
        fh.write(f"endsolid {name}\n")


def write_surface_stl(path, ls: LevelSet, name: str = "millforge") -> None:
    verts, faces = extract_surface(ls)
    write_stl(path, verts, faces, name)


def read_stl(path) -> np.ndarray:
    """Triangles (M, 3, 3) from an ASCII or binary STL file."""
    with open(path, "rb") as fh:
        head = fh.read(5)
        fh.seek(0)
        data = fh.read()
    if head == b"solid" and b"facet" in data[:2000]:
        coords = []
        for line in data.decode("ascii", errors="replace").splitlines():
            line = line.strip()
            if line.startswith("vertex"):
                coords.append([float(t) for t in line.split()[1:4]])
        tris = np.asarray(coords, dtype=float)
        if tris.size == 0 or tris.shape[0] % 3:
            raise ValueError(f"{path}: malformed ASCII STL")
        return tris.reshape(-1, 3, 3)
    count = struct.unpack_from("<I", data, 80)[0]
    rec = np.frombuffer(data, dtype=np.uint8, count=50 * count, offset=84)
    rec = rec.reshape(count, 50)
    tris = rec[:, 12:48].copy().view("<f4").reshape(count, 3, 3)
    return tris.astype(float)


@njit(cache=True)
def _column_crossings(tris, ox, oy, h, nx, ny, zbuf, zcnt):
    """Collect z values where each (x, y) grid column pierces a triangle."""
    eps = 1e-9 * h
    for t in range(tris.shape[0]):
        ax, ay, az = tris[t, 0, 0], tris[t, 0, 1], tris[t, 0, 2]
        bx, by, bz = tris[t, 1, 0], tris[t, 1, 1], tris[t, 1, 2]
        cx, cy, cz = tris[t, 2, 0], tris[t, 2, 1], tris[t, 2, 2]
        xmin = min(ax, min(bx, cx))
        xmax = max(ax, max(bx, cx))
        ymin = min(ay, min(by, cy))
        ymax = max(ay, max(by, cy))
        i0 = max(0, int(np.ceil((xmin - ox) / h - 1e-12)))
        i1 = min(nx - 1, int(np.floor((xmax - ox) / h + 1e-12)))
        j0 = max(0, int(np.ceil((ymin - oy) / h - 1e-12)))
        j1 = min(ny - 1, int(np.floor((ymax - oy) / h + 1e-12)))
        d = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if abs(d) < 1e-30:
            continue
        for i in range(i0, i1 + 1):
            px = ox + i * h + eps
            for j in range(j0, j1 + 1):
                py = oy + j * h + eps
                w0 = ((bx - px) * (cy - py) - (by - py) * (cx - px)) / d
                w1 = ((cx - px) * (ay - py) - (cy - py) * (ax - px)) / d
                w2 = 1.0 - w0 - w1
                if w0 >= 0.0 and w1 >= 0.0 and w2 >= 0.0:
                    z = w0 * az + w1 * bz + w2 * cz
                    c = zcnt[i, j]
                    if c < zbuf.shape[2]:
                        zbuf[i, j, c] = z
                        zcnt[i, j] = c + 1


def voxelize_stl(tris: np.ndarray, spacing: float, padding: float | None = None,
                 band_width: float | None = None) -> LevelSet:
    """Signed distance field of a watertight mesh, accurate to O(h).

    Inside/outside comes from z-ray crossing parity per grid column;
    crossing positions along all three axis directions seed the
    redistancing so grazing surfaces stay sharp.
    """
    h = float(spacing)
    pad = 4.0 * h if padding is None else float(padding)
    lo = tris.reshape(-1, 3).min(axis=0) - pad
    hi = tris.reshape(-1, 3).max(axis=0) + pad
    grid = GridSpec.from_bounds(lo, hi, h)
    dims = grid.dims
    gamma = band_width if band_width is not None else 4.0 * h
    dist = np.full(dims, gamma)
    inside = np.zeros(dims, dtype=bool)

    for axis, perm in ((2, (0, 1, 2)), (0, (1, 2, 0)), (1, (2, 0, 1))):
        # permute so the cast direction is the last axis
        t = np.ascontiguousarray(tris[:, :, perm], dtype=np.float64)
        pdims = tuple(dims[p] for p in perm)
        porigin = tuple(grid.origin[p] for p in perm)
        buf = np.zeros((pdims[0], pdims[1], 64))
        cnt = np.zeros((pdims[0], pdims[1]), dtype=np.int64)
        _column_crossings(t, porigin[0], porigin[1], h, pdims[0], pdims[1], buf, cnt)
        waxis = porigin[2] + h * np.arange(pdims[2])
        d_p = np.full(pdims, gamma)
        in_p = np.zeros(pdims, dtype=bool)
        dedup_tol = 1e-4 * h  # rays through shared mesh edges report twice
        for i in range(pdims[0]):
            for j in range(pdims[1]):
                c = cnt[i, j]
                if c == 0:
                    continue
                ws = np.sort(buf[i, j, :c])
                ws = ws[np.concatenate(([True], np.diff(ws) > dedup_tol))]
                d_p[i, j, :] = np.minimum(
                    np.abs(waxis[:, None] - ws[None, :]).min(axis=1), gamma)
                in_p[i, j, :] = (np.searchsorted(ws, waxis, side="right") % 2) == 1
        inv = np.argsort(perm)
        dist = np.minimum(dist, d_p.transpose(inv))
        if axis == 2:
            inside = in_p.transpose(inv)
    phi = np.where(inside, -dist, dist)
    return LevelSet.from_sdf(grid, phi, band_width=gamma)

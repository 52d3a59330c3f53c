"""Linear elastostatics on the active voxel sub-mesh of the shape.

Cells overlapping the shape become trilinear hexahedral elements whose
stiffness is scaled by the cell's solid fraction (floored at `rho_min` to
keep the system well conditioned).  The solve yields per-load-case
displacements and compliance plus the boundary energy density that drives
the shape gradient.

Units: lengths mm, Young's modulus Pa (converted to N/mm^2 internally),
tractions N/mm^2, forces N, compliance N*mm.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pyamg
from numba import njit
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from scipy.sparse.linalg import cg

from .errors import EmptyShapeError, FloatingStructureError
from .grid import GridSpec
from .levelset import LevelSet, SurfaceSamples

PA_TO_N_PER_MM2 = 1e-6

# local corner order of a hex element, as (di, dj, dk) node offsets
_CORNERS = np.array([
    (0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
    (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1),
], dtype=np.int64)
_CORNER_OFF = _CORNERS  # name used inside the numba kernels


@dataclass(frozen=True)
class Material:
    youngs_modulus: float  # Pa
    poisson_ratio: float

    def __post_init__(self):
        if self.youngs_modulus <= 0.0:
            raise ValueError("Young's modulus must be positive")
        if not -1.0 < self.poisson_ratio < 0.5:
            raise ValueError("Poisson ratio must lie in (-1, 0.5)")


@dataclass(frozen=True)
class PatchRegion:
    """Axis-aligned box selecting boundary faces, optionally by face normal."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    normal: tuple[float, float, float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(float(c) for c in self.lo))
        object.__setattr__(self, "hi", tuple(float(c) for c in self.hi))
        if self.normal is not None:
            n = np.asarray(self.normal, dtype=float)
            if np.count_nonzero(n) != 1:
                raise ValueError("patch normal must be axis-aligned")
            object.__setattr__(self, "normal", tuple(n / np.linalg.norm(n)))

    def contains(self, points: np.ndarray, tol: float) -> np.ndarray:
        lo = np.asarray(self.lo) - tol
        hi = np.asarray(self.hi) + tol
        return np.all((points >= lo) & (points <= hi), axis=1)


@dataclass
class LoadCase:
    tractions: list[tuple[PatchRegion, np.ndarray]]
    fixed: list[PatchRegion]

    def __post_init__(self):
        if not self.fixed:
            raise ValueError("every load case needs at least one fixed patch")
        self.tractions = [(p, np.asarray(t, dtype=float)) for p, t in self.tractions]


def hex_stiffness(nu: float, h: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Element stiffness for E = 1 (2x2x2 Gauss), centroid B matrix, and D."""
    lam = nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    mu = 1.0 / (2.0 * (1.0 + nu))
    D = np.zeros((6, 6))
    D[:3, :3] = lam
    D[np.diag_indices(3)] = lam + 2.0 * mu
    D[3, 3] = D[4, 4] = D[5, 5] = mu

    signs = 2.0 * _CORNERS - 1.0  # corner coords in the reference cube [-1, 1]^3

    def b_matrix(xi):
        dn = np.empty((8, 3))
        for a in range(8):
            sa = signs[a]
            dn[a, 0] = 0.125 * sa[0] * (1 + sa[1] * xi[1]) * (1 + sa[2] * xi[2])
            dn[a, 1] = 0.125 * sa[1] * (1 + sa[0] * xi[0]) * (1 + sa[2] * xi[2])
            dn[a, 2] = 0.125 * sa[2] * (1 + sa[0] * xi[0]) * (1 + sa[1] * xi[1])
        dn *= 2.0 / h  # jacobian of the reference-to-physical map is (h/2) I
        B = np.zeros((6, 24))
        for a in range(8):
            c = 3 * a
            B[0, c] = dn[a, 0]
            B[1, c + 1] = dn[a, 1]
            B[2, c + 2] = dn[a, 2]
            B[3, c] = dn[a, 1]
            B[3, c + 1] = dn[a, 0]
            B[4, c + 1] = dn[a, 2]
            B[4, c + 2] = dn[a, 1]
            B[5, c] = dn[a, 2]
            B[5, c + 2] = dn[a, 0]
        return B

    gp = 1.0 / np.sqrt(3.0)
    ke = np.zeros((24, 24))
    detj = (h / 2.0) ** 3
    for sx in (-gp, gp):
        for sy in (-gp, gp):
            for sz in (-gp, gp):
                B = b_matrix((sx, sy, sz))
                ke += B.T @ D @ B * detj
    ke = 0.5 * (ke + ke.T)  # exact symmetry, so assembly is symmetric by construction
    return ke, b_matrix((0.0, 0.0, 0.0)), D


@njit(cache=True)
def _scatter_blocks(cells, rho, ke, lookup, blocks):
    """Accumulate rho-scaled element stiffness into 27-stencil node blocks."""
    n_cells = cells.shape[0]
    for e in range(n_cells):
        ci, cj, ck = cells[e, 0], cells[e, 1], cells[e, 2]
        scale = rho[e]
        for a in range(8):
            ai = ci + _CORNER_OFF[a, 0]
            aj = cj + _CORNER_OFF[a, 1]
            ak = ck + _CORNER_OFF[a, 2]
            na = lookup[ai, aj, ak]
            for b in range(8):
                di = _CORNER_OFF[b, 0] - _CORNER_OFF[a, 0]
                dj = _CORNER_OFF[b, 1] - _CORNER_OFF[a, 1]
                dk = _CORNER_OFF[b, 2] - _CORNER_OFF[a, 2]
                code = (di + 1) * 9 + (dj + 1) * 3 + (dk + 1)
                for ca in range(3):
                    for cb in range(3):
                        blocks[na, code, ca, cb] += scale * ke[3 * a + ca, 3 * b + cb]


@njit(cache=True)
def _csr_from_blocks(blocks, node_ijk, lookup, red, nfree, dims0, dims1, dims2):
    """Reduced (free-dof) CSR from the stencil blocks, columns ascending."""
    n_nodes = node_ijk.shape[0]
    counts = np.zeros(nfree + 1, np.int64)
    for n in range(n_nodes):
        i, j, k = node_ijk[n, 0], node_ijk[n, 1], node_ijk[n, 2]
        for ca in range(3):
            r = red[n, ca]
            if r < 0:
                continue
            c = 0
            for di in range(-1, 2):
                for dj in range(-1, 2):
                    for dk in range(-1, 2):
                        code = (di + 1) * 9 + (dj + 1) * 3 + (dk + 1)
                        ii, jj, kk = i + di, j + dj, k + dk
                        if 0 <= ii < dims0 and 0 <= jj < dims1 and 0 <= kk < dims2:
                            nb = lookup[ii, jj, kk]
                            if nb >= 0:
                                blk = blocks[n, code]
                                if (blk[ca, 0] != 0.0 or blk[ca, 1] != 0.0
                                        or blk[ca, 2] != 0.0):
                                    for cb in range(3):
                                        if red[nb, cb] >= 0:
                                            c += 1
            counts[r + 1] = c
    indptr = np.zeros(nfree + 1, np.int64)
    for r in range(nfree):
        indptr[r + 1] = indptr[r] + counts[r + 1]
    nnz = indptr[nfree]
    indices = np.empty(nnz, np.int64)
    data = np.empty(nnz, np.float64)
    for n in range(n_nodes):
        i, j, k = node_ijk[n, 0], node_ijk[n, 1], node_ijk[n, 2]
        for ca in range(3):
            r = red[n, ca]
            if r < 0:
                continue
            pos = indptr[r]
            for di in range(-1, 2):
                for dj in range(-1, 2):
                    for dk in range(-1, 2):
                        code = (di + 1) * 9 + (dj + 1) * 3 + (dk + 1)
                        ii, jj, kk = i + di, j + dj, k + dk
                        if 0 <= ii < dims0 and 0 <= jj < dims1 and 0 <= kk < dims2:
                            nb = lookup[ii, jj, kk]
                            if nb >= 0:
                                blk = blocks[n, code]
                                if (blk[ca, 0] != 0.0 or blk[ca, 1] != 0.0
                                        or blk[ca, 2] != 0.0):
                                    for cb in range(3):
                                        rb = red[nb, cb]
                                        if rb >= 0:
                                            indices[pos] = rb
                                            data[pos] = blk[ca, cb]
                                            pos += 1
    return indptr, indices, data


@dataclass
class ElasticState:
    """Active sub-discretization plus the solution fields filled by solve()."""

    grid: GridSpec
    cells: np.ndarray           # (M, 3) active cell indices
    fractions: np.ndarray       # (M,) solid fractions
    rho: np.ndarray             # (M,) stiffness scaling, floored at rho_min
    node_ijk: np.ndarray        # (Nn, 3) active node indices
    lookup: np.ndarray          # full-grid node -> active node index or -1
    rho_min: float
    displacements: list[np.ndarray] = field(default_factory=list)  # (Nn, 3) per case
    compliances: list[float] = field(default_factory=list)
    energy_density: np.ndarray | None = None  # (M,) mean sigma:eps per cell
    mean_compliance: float | None = None

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.node_ijk.shape[0]

    @property
    def is_cut(self) -> np.ndarray:
        return self.fractions < 1.0 - 1e-12

    def cell_centers(self) -> np.ndarray:
        return self.grid.bbox_min + (self.cells + 0.5) * self.grid.spacing

    def node_positions(self) -> np.ndarray:
        return self.grid.bbox_min + self.node_ijk * self.grid.spacing

    def displacement_at(self, case: int, point) -> np.ndarray:
        """Displacement of the active node nearest to a world point."""
        d2 = np.sum((self.node_positions() - np.asarray(point, float)) ** 2, axis=1)
        return self.displacements[case][int(np.argmin(d2))]


def _subcell_weights() -> np.ndarray:
    """Trilinear corner weights at a 4x4x4 sub-sampling of the unit cell."""
    s = (np.arange(4) + 0.5) / 4.0
    pts = np.stack(np.meshgrid(s, s, s, indexing="ij"), axis=-1).reshape(-1, 3)
    w = np.empty((64, 8))
    for a, (di, dj, dk) in enumerate(_CORNERS):
        wx = pts[:, 0] if di else 1.0 - pts[:, 0]
        wy = pts[:, 1] if dj else 1.0 - pts[:, 1]
        wz = pts[:, 2] if dk else 1.0 - pts[:, 2]
        w[:, a] = wx * wy * wz
    return w


_SUB_W = _subcell_weights()


def cell_fractions(ls: LevelSet) -> tuple[np.ndarray, np.ndarray]:
    """Sharp per-cell solid fraction.

    A cell is occupied (fraction > 0) exactly when some corner value is
    negative, since a trilinear interpolant attains its extrema at the
    corners.  Mixed cells get the fraction of sub-sample points inside.
    """
    phi = ls.values
    corners = np.stack([
        phi[c[0]:phi.shape[0] - 1 + c[0],
            c[1]:phi.shape[1] - 1 + c[1],
            c[2]:phi.shape[2] - 1 + c[2]]
        for c in _CORNERS
    ], axis=-1)
    cmin = corners.min(axis=-1)
    cmax = corners.max(axis=-1)
    frac = np.zeros(cmin.shape)
    frac[cmax <= 0.0] = 1.0
    mixed = (cmin < 0.0) & (cmax > 0.0)
    if mixed.any():
        sub = corners[mixed] @ _SUB_W.T
        frac[mixed] = (sub < 0.0).mean(axis=1)
    occupied = cmin < 0.0
    return frac, occupied


def discretize(ls: LevelSet, rho_min: float = 1e-3) -> ElasticState:
    """Classify cells by their solid fraction and index the active sub-mesh."""
    frac_all, occupied = cell_fractions(ls)
    active = np.argwhere(occupied)
    if active.shape[0] == 0:
        raise EmptyShapeError("no active cells: shape has vanished")
    frac = frac_all[occupied]
    rho = np.clip(frac, rho_min, 1.0)

    dims = ls.grid.dims
    node_mask = np.zeros(dims, dtype=bool)
    for off in _CORNERS:
        node_mask[tuple((active + off).T)] = True
    node_ijk = np.argwhere(node_mask)
    lookup = np.full(dims, -1, dtype=np.int64)
    lookup[tuple(node_ijk.T)] = np.arange(node_ijk.shape[0])
    return ElasticState(
        grid=ls.grid,
        cells=np.ascontiguousarray(active.astype(np.int64)),
        fractions=frac,
        rho=np.ascontiguousarray(rho),
        node_ijk=np.ascontiguousarray(node_ijk.astype(np.int64)),
        lookup=lookup,
        rho_min=rho_min,
    )


def _boundary_faces(state: ElasticState):
    """(center, normal, nodes[4]) for every face between active and void."""
    dims = state.grid.dims
    ncells = tuple(d - 1 for d in dims)
    act = np.zeros(ncells, dtype=bool)
    act[tuple(state.cells.T)] = True
    h = state.grid.spacing
    centers, normals, face_nodes = [], [], []
    for axis in range(3):
        for sign in (-1, 1):
            shifted = np.zeros_like(act)
            src = [slice(None)] * 3
            dst = [slice(None)] * 3
            if sign == 1:
                src[axis] = slice(1, None)
                dst[axis] = slice(None, -1)
            else:
                src[axis] = slice(None, -1)
                dst[axis] = slice(1, None)
            shifted[tuple(dst)] = act[tuple(src)]
            exposed = act & ~shifted
            cells = np.argwhere(exposed)
            if cells.shape[0] == 0:
                continue
            ctr = state.grid.bbox_min + (cells + 0.5) * h
            ctr[:, axis] += sign * 0.5 * h
            nrm = np.zeros((cells.shape[0], 3))
            nrm[:, axis] = sign
            # the 4 corner nodes of the exposed face
            corners = [c for c in _CORNERS if c[axis] == (1 if sign == 1 else 0)]
            nodes = np.stack([state.lookup[tuple((cells + c).T)] for c in corners], axis=1)
            centers.append(ctr)
            normals.append(nrm)
            face_nodes.append(nodes)
    return (np.concatenate(centers), np.concatenate(normals),
            np.concatenate(face_nodes))


def _select_faces(patch: PatchRegion, centers, normals, tol):
    mask = patch.contains(centers, tol)
    if patch.normal is not None:
        mask &= normals @ np.asarray(patch.normal) > 0.5
    return mask


def _check_supported(state: ElasticState, fixed_nodes: np.ndarray):
    """Every face-connected component of active cells must touch a fixed node."""
    m = state.n_cells
    ncells = tuple(d - 1 for d in state.grid.dims)
    cell_id = np.full(ncells, -1, dtype=np.int64)
    cell_id[tuple(state.cells.T)] = np.arange(m)
    rows, cols = [], []
    for axis in range(3):
        a = state.cells.copy()
        a[:, axis] += 1
        ok = a[:, axis] < ncells[axis]
        nb = np.full(m, -1, dtype=np.int64)
        nb[ok] = cell_id[tuple(a[ok].T)]
        here = np.where(nb >= 0)[0]
        rows.append(here)
        cols.append(nb[here])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    adj = csr_matrix((np.ones(rows.size), (rows, cols)), shape=(m, m))
    n_comp, labels = connected_components(adj, directed=False)
    if n_comp <= 1 and fixed_nodes.any():
        return
    fixed_cells = np.zeros(m, dtype=bool)
    fixed_set = np.zeros(state.n_nodes, dtype=bool)
    fixed_set[fixed_nodes] = True
    for a, off in enumerate(_CORNERS):
        na = state.lookup[tuple((state.cells + off).T)]
        fixed_cells |= fixed_set[na]
    for comp in range(n_comp):
        members = labels == comp
        if not fixed_cells[members].any():
            centroid = state.cell_centers()[members].mean(axis=0)
            raise FloatingStructureError(
                f"unconstrained component of {int(members.sum())} cells "
                f"around ({centroid[0]:.1f}, {centroid[1]:.1f}, {centroid[2]:.1f}) "
                "has no fixed support",
            )


def _rigid_modes(coords: np.ndarray) -> np.ndarray:
    """Six rigid-body modes at the given node coordinates, one per column."""
    c = coords - coords.mean(axis=0)
    n = coords.shape[0]
    B = np.zeros((3 * n, 6))
    B[0::3, 0] = 1.0
    B[1::3, 1] = 1.0
    B[2::3, 2] = 1.0
    B[0::3, 3] = -c[:, 1]
    B[1::3, 3] = c[:, 0]
    B[1::3, 4] = -c[:, 2]
    B[2::3, 4] = c[:, 1]
    B[0::3, 5] = c[:, 2]
    B[2::3, 5] = -c[:, 0]
    return B


def assemble_stiffness(state: ElasticState, material: Material,
                       fixed_dofs: np.ndarray | None = None) -> csr_matrix:
    """Reduced stiffness matrix on the free dofs (all dofs if none fixed)."""
    h = state.grid.spacing
    ke, _, _ = hex_stiffness(material.poisson_ratio, h)
    ke = ke * material.youngs_modulus * PA_TO_N_PER_MM2
    blocks = np.zeros((state.n_nodes, 27, 3, 3))
    _scatter_blocks(state.cells, state.rho, ke, state.lookup, blocks)
    if fixed_dofs is None:
        fixed_dofs = np.zeros((state.n_nodes, 3), dtype=bool)
    red = np.full((state.n_nodes, 3), -1, dtype=np.int64)
    free = ~fixed_dofs
    red[free] = np.arange(int(free.sum()))
    nfree = int(free.sum())
    d0, d1, d2 = state.grid.dims
    indptr, indices, data = _csr_from_blocks(
        blocks, state.node_ijk, state.lookup, red, nfree, d0, d1, d2
    )
    A = csr_matrix((data, indices, indptr), shape=(nfree, nfree))
    A.red_index = red  # attached for callers that need the dof numbering
    return A


def solve(state: ElasticState, material: Material, load_cases: list[LoadCase],
          rtol: float = 1e-6, patch_tol: float | None = None) -> ElasticState:
    """Solve each load case; fills displacements, compliances, energy density.

    Dirichlet constraints are removed by row/column elimination; the reduced
    SPD system is solved by conjugate gradients with a smoothed-aggregation
    multigrid preconditioner.
    """
    if not load_cases:
        raise ValueError("at least one load case is required")
    h = state.grid.spacing
    tol = 0.5 * h if patch_tol is None else patch_tol
    ke, b0, dmat = hex_stiffness(material.poisson_ratio, h)
    emod = material.youngs_modulus * PA_TO_N_PER_MM2
    ke_scaled = ke * emod

    blocks = np.zeros((state.n_nodes, 27, 3, 3))
    _scatter_blocks(state.cells, state.rho, ke_scaled, state.lookup, blocks)

    centers, normals, face_nodes = _boundary_faces(state)
    coords = state.node_positions()
    d0, d1, d2 = state.grid.dims

    state.displacements = []
    state.compliances = []
    sed_sum = np.zeros(state.n_cells)

    edof_nodes = np.stack(
        [state.lookup[tuple((state.cells + off).T)] for off in _CORNERS], axis=1
    )

    for case in load_cases:
        fixed_nodes_mask = np.zeros(state.n_nodes, dtype=bool)
        for patch in case.fixed:
            sel = _select_faces(patch, centers, normals, tol)
            fixed_nodes_mask[np.unique(face_nodes[sel])] = True
        if not fixed_nodes_mask.any():
            raise ValueError("fixed patch selects no boundary faces of the active mesh")
        _check_supported(state, np.where(fixed_nodes_mask)[0])

        f = np.zeros((state.n_nodes, 3))
        for patch, traction in case.tractions:
            sel = _select_faces(patch, centers, normals, tol)
            if not sel.any():
                raise ValueError("traction patch selects no boundary faces")
            nodal = traction * (h * h / 4.0)
            np.add.at(f, face_nodes[sel].ravel(),
                      np.repeat(nodal[None, :], 4 * int(sel.sum()), axis=0))

        fixed_dofs = np.repeat(fixed_nodes_mask[:, None], 3, axis=1)
        red = np.full((state.n_nodes, 3), -1, dtype=np.int64)
        free = ~fixed_dofs
        nfree = int(free.sum())
        red[free] = np.arange(nfree)
        indptr, indices, data = _csr_from_blocks(
            blocks, state.node_ijk, state.lookup, red, nfree, d0, d1, d2
        )
        A = csr_matrix((data, indices, indptr), shape=(nfree, nfree))
        b = f[free]

        modes = _rigid_modes(coords)
        bfree = modes[free.ravel()]
        # pyamg estimates spectral radii from random vectors; pin the seed so
        # identical problems produce bit-identical solutions
        rng_state = np.random.get_state()
        np.random.seed(1729)
        try:
            ml = pyamg.smoothed_aggregation_solver(A, B=bfree, max_coarse=300)
        finally:
            np.random.set_state(rng_state)
        M = ml.aspreconditioner(cycle="V")
        u_red, info = cg(A, b, rtol=rtol, atol=0.0, maxiter=4000, M=M)
        if info != 0:
            raise FloatingStructureError(
                f"conjugate gradient failed to converge (info={info}); "
                "the structure may be insufficiently constrained"
            )
        u = np.zeros((state.n_nodes, 3))
        u[free] = u_red
        state.displacements.append(u)
        state.compliances.append(float(b @ u_red))

        # centroid strain energy measure sigma:eps per element, full material
        ue = u[edof_nodes].reshape(state.n_cells, 24)
        eps = ue @ b0.T
        sig = eps @ (dmat * emod).T
        sed_sum += np.einsum("ij,ij->i", sig, eps)

    state.energy_density = sed_sum / len(load_cases)
    state.mean_compliance = float(np.mean(state.compliances))
    return state


def shape_gradient_compliance(state: ElasticState, samples: SurfaceSamples) -> np.ndarray:
    """Negative compliance shape gradient per surface sample.

    Returns the mean sigma:eps of the nearest boundary (cut) element, a
    positive density: moving the boundary outward by v lowers compliance at
    first order by the surface integral of (returned value) * v.
    """
    if state.energy_density is None:
        raise ValueError("solve() must run before extracting the shape gradient")
    cut = state.is_cut
    pool = cut if cut.any() else np.ones(state.n_cells, dtype=bool)
    centers = state.cell_centers()[pool]
    tree = cKDTree(centers)
    _, nearest = tree.query(samples.positions, k=1)
    return state.energy_density[pool][nearest]

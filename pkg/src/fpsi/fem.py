"""Finite-element infrastructure on the bilayer mesh.

Reference elements, quadrature, Lagrange spaces of degree 1 and 2 restricted
to one region, batched sparse assembly, trace forms on tagged edges,
Dirichlet elimination and factorized linear solves.

Local element DOFs of a vector space are ordered component-major: all
scalar basis functions of component 0, then those of component 1. Global
vector DOFs follow the same blocking, ``comp * n_scalar + scalar_index``.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import BOUNDARY_TAGS, BilayerMesh, MeshError, REGION_NAMES

__all__ = [
    "AssemblyError",
    "SolverError",
    "FESpace",
    "LinearSystem",
    "Factorization",
    "triangle_rule",
    "edge_rule",
    "p1_basis",
    "p2_basis",
    "build_space",
    "assemble",
    "assemble_vector",
    "assemble_trace",
    "assemble_trace_vector",
    "evaluation_matrix",
    "apply_dirichlet",
    "solve",
    "estimate_trace_inverse_constant",
    "ScalarMass",
    "VectorMass",
    "Laplacian",
    "StrainEnergy",
    "DivergencePairing",
    "Convection",
    "Source",
    "TraceProduct",
]


class AssemblyError(ValueError):
    """Incompatible spaces or kernel for an assembly request."""


class SolverError(RuntimeError):
    """A linear solve failed or missed its residual tolerance."""

    def __init__(self, message: str, step: int | None = None, label: str | None = None):
        self.step = step
        self.label = label
        super().__init__(message)


# --------------------------------------------------------------------------
# Quadrature
# --------------------------------------------------------------------------

def _dunavant(order: int) -> tuple[np.ndarray, np.ndarray]:
    if order <= 1:
        return np.array([[1.0 / 3.0, 1.0 / 3.0]]), np.array([0.5])
    if order == 2:
        pts = np.array([[1 / 6, 1 / 6], [2 / 3, 1 / 6], [1 / 6, 2 / 3]])
        return pts, np.full(3, 1 / 6)
    if order <= 4:
        a1 = 0.44594849091596488632
        a2 = 0.091576213509770743460
        w1 = 0.22338158967801146570
        w2 = 0.10995174365532186764
        pts = np.array([
            [a1, a1], [1 - 2 * a1, a1], [a1, 1 - 2 * a1],
            [a2, a2], [1 - 2 * a2, a2], [a2, 1 - 2 * a2],
        ])
        return pts, 0.5 * np.array([w1, w1, w1, w2, w2, w2])
    if order == 5:
        s15 = np.sqrt(15.0)
        a1 = (6 - s15) / 21
        a2 = (6 + s15) / 21
        w0 = 9 / 40
        w1 = (155 - s15) / 1200
        w2 = (155 + s15) / 1200
        pts = np.array([
            [1 / 3, 1 / 3],
            [a1, a1], [1 - 2 * a1, a1], [a1, 1 - 2 * a1],
            [a2, a2], [1 - 2 * a2, a2], [a2, 1 - 2 * a2],
        ])
        return pts, 0.5 * np.array([w0, w1, w1, w1, w2, w2, w2])
    raise ValueError(f"no triangle rule of order {order} (max 5)")


def triangle_rule(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric quadrature on the reference triangle ``(0,0), (1,0), (0,1)``.

    Parameters
    ----------
    order : int
        Polynomial degree integrated exactly (1 to 5).

    Returns
    -------
    points : ndarray, shape (nq, 2)
    weights : ndarray, shape (nq,)
        Weights sum to the reference area 1/2.
    """
    return _dunavant(order)


def edge_rule(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre rule on ``[0, 1]`` exact for degree ``order``."""
    n = max(1, (order + 2) // 2)
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


# --------------------------------------------------------------------------
# Reference basis functions
# --------------------------------------------------------------------------

P2_EDGES = ((0, 1), (1, 2), (2, 0))


def p1_basis(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Values ``(nq, 3)`` and reference gradients ``(nq, 3, 2)`` of P1 at ``pts``."""
    xi, eta = pts[:, 0], pts[:, 1]
    vals = np.column_stack([1 - xi - eta, xi, eta])
    grads = np.broadcast_to(np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]]), (len(pts), 3, 2)).copy()
    return vals, grads


def p2_basis(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Values ``(nq, 6)`` and reference gradients ``(nq, 6, 2)`` of P2 at ``pts``.

    Ordering: three vertex functions, then edge functions for edges
    (0,1), (1,2), (2,0).
    """
    lam, dlam = p1_basis(pts)
    nq = len(pts)
    vals = np.empty((nq, 6))
    grads = np.empty((nq, 6, 2))
    for i in range(3):
        vals[:, i] = lam[:, i] * (2 * lam[:, i] - 1)
        grads[:, i] = (4 * lam[:, i] - 1)[:, None] * dlam[:, i]
    for k, (a, b) in enumerate(P2_EDGES):
        vals[:, 3 + k] = 4 * lam[:, a] * lam[:, b]
        grads[:, 3 + k] = 4 * (lam[:, a][:, None] * dlam[:, b] + lam[:, b][:, None] * dlam[:, a])
    return vals, grads


def _edge_basis(degree: int, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """1D Lagrange basis on ``[0, 1]``: endpoint functions then the midpoint function."""
    if degree == 1:
        vals = np.column_stack([1 - s, s])
        ders = np.broadcast_to(np.array([-1.0, 1.0]), (len(s), 2)).copy()
    else:
        vals = np.column_stack([(1 - s) * (1 - 2 * s), s * (2 * s - 1), 4 * s * (1 - s)])
        ders = np.column_stack([4 * s - 3, 4 * s - 1, 4 - 8 * s])
    return vals, ders


_BASIS = {1: p1_basis, 2: p2_basis}


# --------------------------------------------------------------------------
# Spaces
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FESpace:
    """Lagrange space of degree 1 or 2 on one region of the mesh.

    Attributes
    ----------
    mesh : BilayerMesh
    region : int
        ``FLUID`` or ``PORO``.
    degree : int
        1 or 2.
    ncomp : int
        1 for scalar fields, 2 for vector fields.
    triangles : ndarray
        Global triangle ids of the region, in mesh order.
    dof_map : ndarray, shape (n_cells, 3 or 6)
        Scalar DOF indices per cell.
    n_scalar : int
        Number of scalar DOFs (per component).
    vertices : ndarray
        Global node ids of the region vertices, ordered as the first scalar DOFs.
    edges : ndarray, shape (n_edges, 2)
        Sorted node pairs; edge ``k`` carries scalar DOF ``len(vertices) + k`` for P2.
    coords : ndarray, shape (n_scalar, 2)
        Nodal coordinates of every scalar DOF.
    boundary : dict
        Tag -> sorted scalar DOF indices on edges with that tag.
    """

    mesh: BilayerMesh
    region: int
    degree: int
    ncomp: int
    triangles: np.ndarray
    dof_map: np.ndarray
    n_scalar: int
    vertices: np.ndarray
    edges: np.ndarray
    coords: np.ndarray
    boundary: dict = field(repr=False)
    _vertex_lookup: np.ndarray = field(repr=False)
    _edge_lookup: dict = field(repr=False)
    _cell_of_triangle: np.ndarray = field(repr=False)

    @property
    def ndofs(self) -> int:
        return self.ncomp * self.n_scalar

    @property
    def n_local(self) -> int:
        return self.dof_map.shape[1]

    def dofs(self, tag: str | None = None, comp: int | None = None) -> np.ndarray:
        """Global DOF indices on a boundary tag (or everywhere) for one or all components."""
        scalar = np.arange(self.n_scalar) if tag is None else self.boundary[tag]
        comps = range(self.ncomp) if comp is None else [comp]
        return np.concatenate([c * self.n_scalar + scalar for c in comps])

    def vertex_dof(self, nodes) -> np.ndarray:
        """Scalar DOF index of global mesh nodes (which must belong to the region)."""
        idx = self._vertex_lookup[np.asarray(nodes)]
        if np.any(idx < 0):
            raise MeshError("node is not a vertex of this region")
        return idx

    def edge_dof(self, a, b) -> int:
        """Scalar DOF of the midpoint of edge ``(a, b)`` (P2 only)."""
        if self.degree != 2:
            raise AssemblyError("edge DOFs exist only for P2 spaces")
        key = (min(a, b), max(a, b))
        return len(self.vertices) + self._edge_lookup[key]

    def local_cells(self, triangles: np.ndarray) -> np.ndarray:
        """Region-local cell index of global triangle ids (``-1`` if outside)."""
        return self._cell_of_triangle[np.asarray(triangles)]

    def edge_dofs(self, edges: np.ndarray) -> np.ndarray:
        """Scalar DOFs on each edge: ``(n, 2)`` for P1 and ``(n, 3)`` for P2 (midpoint last)."""
        edges = np.asarray(edges)
        ends = self.vertex_dof(edges)
        if self.degree == 1:
            return ends
        mids = np.array([self.edge_dof(a, b) for a, b in edges], dtype=np.int64)
        return np.column_stack([ends, mids])

    def interpolate(self, func: Callable) -> np.ndarray:
        """Nodal interpolant of ``func(x, y)`` (scalar, or tuple for vector spaces)."""
        x, y = self.coords[:, 0], self.coords[:, 1]
        val = func(x, y)
        if self.ncomp == 1:
            return np.broadcast_to(np.asarray(val, dtype=float), (self.n_scalar,)).copy()
        return np.concatenate([np.broadcast_to(np.asarray(v, dtype=float), (self.n_scalar,)) for v in val])


def build_space(mesh: BilayerMesh, region: int, degree: int, ncomp: int = 1) -> FESpace:
    """Build a Lagrange space of the given degree and component count on a region."""
    if degree not in (1, 2):
        raise AssemblyError(f"unsupported degree {degree}")
    if ncomp not in (1, 2):
        raise AssemblyError(f"unsupported component count {ncomp}")
    if region not in REGION_NAMES:
        raise AssemblyError(f"unknown region {region}")
    tri_ids = np.flatnonzero(mesh.regions == region)
    tris = mesh.triangles[tri_ids]
    vertices = np.unique(tris)
    vlookup = np.full(mesh.n_nodes, -1, dtype=np.int64)
    vlookup[vertices] = np.arange(len(vertices))
    vdofs = vlookup[tris]

    cell_of = np.full(mesh.n_triangles, -1, dtype=np.int64)
    cell_of[tri_ids] = np.arange(len(tri_ids))

    local_edges = np.stack([np.sort(tris[:, list(e)], axis=1) for e in P2_EDGES], axis=1)
    edges, inv = np.unique(local_edges.reshape(-1, 2), axis=0, return_inverse=True)
    inv = inv.reshape(-1, 3)
    edge_lookup = {(int(a), int(b)): k for k, (a, b) in enumerate(edges)}

    coords_v = mesh.nodes[vertices]
    if degree == 1:
        dof_map = vdofs
        coords = coords_v
        n_scalar = len(vertices)
    else:
        dof_map = np.column_stack([vdofs, len(vertices) + inv])
        coords = np.vstack([coords_v, 0.5 * (mesh.nodes[edges[:, 0]] + mesh.nodes[edges[:, 1]])])
        n_scalar = len(vertices) + len(edges)

    boundary = {}
    for tag in BOUNDARY_TAGS:
        bedges = mesh.edges_with_tag(tag)
        inside = np.all(vlookup[bedges] >= 0, axis=1) if len(bedges) else np.zeros(0, bool)
        bedges = bedges[inside]
        if len(bedges) == 0:
            boundary[tag] = np.zeros(0, dtype=np.int64)
            continue
        ids = [vlookup[bedges].ravel()]
        if degree == 2:
            ids.append(len(vertices) + np.array([edge_lookup[(min(a, b), max(a, b))] for a, b in bedges]))
        boundary[tag] = np.unique(np.concatenate(ids))

    for arr in (tri_ids, dof_map, vertices, edges, coords):
        arr.setflags(write=False)
    return FESpace(
        mesh=mesh, region=region, degree=degree, ncomp=ncomp, triangles=tri_ids,
        dof_map=dof_map, n_scalar=n_scalar, vertices=vertices, edges=edges, coords=coords,
        boundary=boundary, _vertex_lookup=vlookup, _edge_lookup=edge_lookup,
        _cell_of_triangle=cell_of,
    )


# --------------------------------------------------------------------------
# Element evaluation context
# --------------------------------------------------------------------------

@dataclass
class CellBatch:
    """Geometry and basis data for a batch of cells at the quadrature points."""

    cells: np.ndarray
    xq: np.ndarray          # (nE, nq, 2) physical quadrature points
    wdet: np.ndarray        # (nE, nq) weights times |det J|
    values: dict            # degree -> (nq, nloc)
    grads: dict             # degree -> (nE, nq, nloc, 2)


def _cell_batch(space: FESpace, cells: np.ndarray, order: int, degrees: Iterable[int]) -> CellBatch:
    mesh = space.mesh
    pts, wts = triangle_rule(order)
    p = mesh.nodes[mesh.triangles[space.triangles[cells]]]
    J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)  # columns = edge vectors
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    invJ = np.empty_like(J)
    invJ[:, 0, 0] = J[:, 1, 1] / det
    invJ[:, 1, 1] = J[:, 0, 0] / det
    invJ[:, 0, 1] = -J[:, 0, 1] / det
    invJ[:, 1, 0] = -J[:, 1, 0] / det
    xq = p[:, None, 0, :] + np.einsum("eij,qj->eqi", J, pts)
    values, grads = {}, {}
    for deg in set(degrees):
        v, g = _BASIS[deg](pts)
        values[deg] = v
        grads[deg] = np.einsum("qkj,eji->eqki", g, invJ)
    return CellBatch(cells=cells, xq=xq, wdet=np.abs(det)[:, None] * wts[None, :], values=values, grads=grads)


# --------------------------------------------------------------------------
# Kernels
# --------------------------------------------------------------------------

class Kernel:
    """Element integrand producing local matrices for a batch of cells.

    Subclasses set ``row_comps``/``col_comps`` (required component counts,
    ``None`` for any) and ``degree_boost`` (polynomial degree of the
    coefficient fields), and implement :meth:`local`.
    """

    row_comps: int | None = None
    col_comps: int | None = None
    derivatives = (0, 0)
    degree_boost = 0

    def quadrature_order(self, row: FESpace, col: FESpace) -> int:
        deg = row.degree + col.degree - sum(self.derivatives) + self.degree_boost
        return 4 if deg <= 4 else 5

    def local(self, batch: CellBatch, row: FESpace, col: FESpace) -> np.ndarray:
        raise NotImplementedError

    def __add__(self, other: "Kernel") -> "Kernel":
        return LinearCombination([(1.0, self), (1.0, other)])

    def __rmul__(self, scale: float) -> "Kernel":
        return LinearCombination([(float(scale), self)])


class LinearCombination(Kernel):
    def __init__(self, terms):
        flat = []
        for c, k in terms:
            if isinstance(k, LinearCombination):
                flat.extend((c * c2, k2) for c2, k2 in k.terms)
            else:
                flat.append((c, k))
        self.terms = flat

    def quadrature_order(self, row, col):
        return max(k.quadrature_order(row, col) for _, k in self.terms)

    def local(self, batch, row, col):
        return sum(c * k.local(batch, row, col) for c, k in self.terms)


def _vector_block(scalar_local: np.ndarray, ncomp: int) -> np.ndarray:
    """Block-diagonal replication of a scalar local matrix over components."""
    nE, nr, nc = scalar_local.shape
    out = np.zeros((nE, ncomp * nr, ncomp * nc))
    for c in range(ncomp):
        out[:, c * nr:(c + 1) * nr, c * nc:(c + 1) * nc] = scalar_local
    return out


class ScalarMass(Kernel):
    """``coef * int u v``; replicated over components for vector spaces."""

    def __init__(self, coef: float = 1.0):
        self.coef = float(coef)

    def local(self, batch, row, col):
        if row.ncomp != col.ncomp:
            raise AssemblyError("mass kernel needs matching component counts")
        vr, vc = batch.values[row.degree], batch.values[col.degree]
        m = self.coef * np.einsum("eq,qi,qj->eij", batch.wdet, vr, vc)
        return m if row.ncomp == 1 else _vector_block(m, row.ncomp)


VectorMass = ScalarMass


class Laplacian(Kernel):
    """``coef * int grad u . grad v`` on scalar spaces."""

    row_comps = col_comps = 1
    derivatives = (1, 1)

    def __init__(self, coef: float = 1.0):
        self.coef = float(coef)

    def local(self, batch, row, col):
        gr, gc = batch.grads[row.degree], batch.grads[col.degree]
        return self.coef * np.einsum("eq,eqid,eqjd->eij", batch.wdet, gr, gc)


class StrainEnergy(Kernel):
    """``2 mu int D(u):D(v) + lam int div u div v`` on vector spaces."""

    row_comps = col_comps = 2
    derivatives = (1, 1)

    def __init__(self, mu: float, lam: float = 0.0):
        self.mu = float(mu)
        self.lam = float(lam)

    def local(self, batch, row, col):
        gr, gc = batch.grads[row.degree], batch.grads[col.degree]
        w = batch.wdet
        nr, nc = gr.shape[2], gc.shape[2]
        out = np.empty((len(w), 2 * nr, 2 * nc))
        # D(u):D(v) = sum_ab (d_b u_a + d_a u_b)(d_b v_a + d_a v_b)/4
        for a in range(2):
            for c in range(2):
                # row component a (test), column component c (trial)
                blk = self.mu * np.einsum("eq,eqj,eqi->eij", w, gc[..., a], gr[..., c])
                if a == c:
                    blk = blk + self.mu * np.einsum("eq,eqid,eqjd->eij", w, gr, gc)
                if self.lam:
                    blk = blk + self.lam * np.einsum("eq,eqi,eqj->eij", w, gr[..., a], gc[..., c])
                out[:, a * nr:(a + 1) * nr, c * nc:(c + 1) * nc] = blk
        return out


class DivergencePairing(Kernel):
    """``coef * int q div u`` with scalar rows ``q`` and vector columns ``u``."""

    row_comps = 1
    col_comps = 2
    derivatives = (0, 1)

    def __init__(self, coef: float = 1.0):
        self.coef = float(coef)

    def local(self, batch, row, col):
        vr = batch.values[row.degree]
        gc = batch.grads[col.degree]
        blocks = [self.coef * np.einsum("eq,qi,eqj->eij", batch.wdet, vr, gc[..., d]) for d in range(2)]
        return np.concatenate(blocks, axis=2)


class Convection(Kernel):
    """``rho int ((a - w) . grad) u . v`` with the advecting field given as DOFs.

    Parameters
    ----------
    rho : float
    advecting : ndarray
        DOF vector in the column space (the fluid velocity space).
    domain_velocity : ndarray, optional
        Mesh velocity DOFs in the same space; zero in fixed-domain mode.
    """

    row_comps = col_comps = 2
    derivatives = (0, 1)

    def __init__(self, rho: float, advecting: np.ndarray, domain_velocity: np.ndarray | None = None):
        self.rho = float(rho)
        self.advecting = np.asarray(advecting, dtype=float)
        self.domain_velocity = None if domain_velocity is None else np.asarray(domain_velocity, dtype=float)

    def quadrature_order(self, row, col):
        return 5

    def local(self, batch, row, col):
        field_ = self.advecting if self.domain_velocity is None else self.advecting - self.domain_velocity
        if field_.shape != (col.ndofs,):
            raise AssemblyError(f"advecting field has {field_.shape} entries, expected {col.ndofs}")
        dm = col.dof_map[batch.cells]
        vc = batch.values[col.degree]
        a = np.stack([np.einsum("qi,ei->eq", vc, field_[c * col.n_scalar + dm]) for c in range(2)], axis=-1)
        adv_grad = np.einsum("eqd,eqjd->eqj", a, batch.grads[col.degree])
        vr = batch.values[row.degree]
        m = self.rho * np.einsum("eq,qi,eqj->eij", batch.wdet, vr, adv_grad)
        return _vector_block(m, 2)


class Source(Kernel):
    """Load kernel ``int f v`` used by :func:`assemble_vector`.

    ``func(x, y)`` returns a scalar array or, for vector spaces, a pair.
    """

    degree_boost = 2

    def __init__(self, func: Callable):
        self.func = func

    def vector(self, batch, space):
        x, y = batch.xq[..., 0], batch.xq[..., 1]
        val = self.func(x, y)
        v = batch.values[space.degree]
        comps = [val] if space.ncomp == 1 else list(val)
        parts = [np.einsum("eq,eq,qi->ei", batch.wdet, np.broadcast_to(c, x.shape), v) for c in comps]
        return np.concatenate(parts, axis=1)


def _check_pair(row: FESpace, col: FESpace, kernel: Kernel) -> None:
    if row.mesh is not col.mesh:
        raise AssemblyError("spaces live on different meshes")
    if row.region != col.region:
        raise AssemblyError(
            f"region mismatch: rows on {REGION_NAMES[row.region]}, columns on {REGION_NAMES[col.region]}"
        )
    if kernel.row_comps is not None and row.ncomp != kernel.row_comps:
        raise AssemblyError(f"{type(kernel).__name__} needs {kernel.row_comps}-component rows")
    if kernel.col_comps is not None and col.ncomp != kernel.col_comps:
        raise AssemblyError(f"{type(kernel).__name__} needs {kernel.col_comps}-component columns")


def _global_dofs(space: FESpace, cells: np.ndarray) -> np.ndarray:
    dm = space.dof_map[cells]
    return np.concatenate([c * space.n_scalar + dm for c in range(space.ncomp)], axis=1)


def _chunks(n: int, workers: int) -> list[np.ndarray]:
    workers = max(1, int(workers))
    bounds = np.linspace(0, n, workers + 1).astype(int)
    return [np.arange(bounds[i], bounds[i + 1]) for i in range(workers) if bounds[i + 1] > bounds[i]]


def _map_chunks(fn, chunks, workers):
    if workers <= 1 or len(chunks) <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, chunks))


def assemble(row: FESpace, col: FESpace, kernel: Kernel, workers: int = 1) -> sp.csr_matrix:
    """Assemble the sparse matrix of ``kernel`` with test space ``row`` and trial space ``col``.

    Cells are split into ``workers`` contiguous chunks evaluated concurrently;
    the triplets are concatenated in cell order before conversion, so the
    result is bitwise independent of the worker count.
    """
    _check_pair(row, col, kernel)
    order = kernel.quadrature_order(row, col)
    ncell = len(row.triangles)

    def work(cells):
        batch = _cell_batch(row, cells, order, (row.degree, col.degree))
        loc = kernel.local(batch, row, col)
        gr = _global_dofs(row, cells)
        gc = _global_dofs(col, cells)
        I = np.broadcast_to(gr[:, :, None], loc.shape)
        J = np.broadcast_to(gc[:, None, :], loc.shape)
        return I.ravel(), J.ravel(), loc.ravel()

    parts = _map_chunks(work, _chunks(ncell, workers), workers)
    I = np.concatenate([p[0] for p in parts])
    J = np.concatenate([p[1] for p in parts])
    V = np.concatenate([p[2] for p in parts])
    A = sp.coo_matrix((V, (I, J)), shape=(row.ndofs, col.ndofs)).tocsr()
    A.sum_duplicates()
    A.sort_indices()
    return A


def assemble_vector(space: FESpace, kernel: Source, workers: int = 1) -> np.ndarray:
    """Assemble a load vector ``int f v`` over the space's region."""
    order = min(5, space.degree + kernel.degree_boost)
    ncell = len(space.triangles)

    def work(cells):
        batch = _cell_batch(space, cells, order, (space.degree,))
        return _global_dofs(space, cells).ravel(), kernel.vector(batch, space).ravel()

    parts = _map_chunks(work, _chunks(ncell, workers), workers)
    out = np.zeros(space.ndofs)
    for idx, val in parts:
        np.add.at(out, idx, val)
    return out


# --------------------------------------------------------------------------
# Trace forms on tagged edges
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TraceProduct:
    """Edge integrand ``coef * int D^r(v_row_comp) D^c(u_col_comp) ds``.

    ``D`` is the derivative along the edge direction of increasing
    parameter; on the interface this is ``d/dx``.
    """

    row_comp: int = 0
    col_comp: int = 0
    row_derivative: int = 0
    col_derivative: int = 0
    coef: float = 1.0


def _edge_geometry(space: FESpace, tag: str):
    mesh = space.mesh
    edges = mesh.edges_with_tag(tag)
    if len(edges) == 0:
        raise AssemblyError(f"no edges tagged {tag!r}")
    if np.any(space._vertex_lookup[edges] < 0):
        raise AssemblyError(f"edges tagged {tag!r} are not on the {REGION_NAMES[space.region]} region")
    # orient each edge so its parameter increases along x (or y for vertical edges)
    pa, pb = mesh.nodes[edges[:, 0]], mesh.nodes[edges[:, 1]]
    flip = (pb[:, 0] < pa[:, 0]) | ((pb[:, 0] == pa[:, 0]) & (pb[:, 1] < pa[:, 1]))
    edges = np.where(flip[:, None], edges[:, ::-1], edges)
    length = np.linalg.norm(mesh.nodes[edges[:, 1]] - mesh.nodes[edges[:, 0]], axis=1)
    return edges, length


def assemble_trace(row: FESpace, col: FESpace, terms: Sequence[TraceProduct] | TraceProduct,
                   tag: str = "interface", order: int = 4) -> sp.csr_matrix:
    """Assemble products of traces on the edges with ``tag``.

    The two spaces may live on different regions as long as both contain the
    tagged edges (the interface belongs to both).
    """
    if row.mesh is not col.mesh:
        raise AssemblyError("spaces live on different meshes")
    if isinstance(terms, TraceProduct):
        terms = [terms]
    edges, length = _edge_geometry(row, tag)
    _edge_geometry(col, tag)
    s, w = edge_rule(order)
    vr, dr = _edge_basis(row.degree, s)
    vc, dc = _edge_basis(col.degree, s)
    er, ec = row.edge_dofs(edges), col.edge_dofs(edges)
    I, J, V = [], [], []
    for t in terms:
        if t.row_comp >= row.ncomp or t.col_comp >= col.ncomp:
            raise AssemblyError("trace component out of range")
        br = dr if t.row_derivative else vr
        bc = dc if t.col_derivative else vc
        scale = length ** (1 - t.row_derivative - t.col_derivative)
        loc = t.coef * scale[:, None, None] * np.einsum("q,qi,qj->ij", w, br, bc)[None]
        gi = t.row_comp * row.n_scalar + er
        gj = t.col_comp * col.n_scalar + ec
        I.append(np.broadcast_to(gi[:, :, None], loc.shape).ravel())
        J.append(np.broadcast_to(gj[:, None, :], loc.shape).ravel())
        V.append(loc.ravel())
    A = sp.coo_matrix((np.concatenate(V), (np.concatenate(I), np.concatenate(J))),
                      shape=(row.ndofs, col.ndofs)).tocsr()
    A.sum_duplicates()
    A.sort_indices()
    return A


def assemble_trace_vector(space: FESpace, func: Callable, comp: int = 0, tag: str = "interface",
                          order: int = 6) -> np.ndarray:
    """Load vector ``int_tag func(x, y) v_comp ds``."""
    edges, length = _edge_geometry(space, tag)
    s, w = edge_rule(order)
    vals, _ = _edge_basis(space.degree, s)
    xa, xb = space.mesh.nodes[edges[:, 0]], space.mesh.nodes[edges[:, 1]]
    xq = xa[:, None, :] + s[None, :, None] * (xb - xa)[:, None, :]
    f = np.broadcast_to(np.asarray(func(xq[..., 0], xq[..., 1]), dtype=float), xq.shape[:2])
    loc = np.einsum("e,q,eq,qi->ei", length, w, f, vals)
    out = np.zeros(space.ndofs)
    np.add.at(out, comp * space.n_scalar + space.edge_dofs(edges), loc)
    return out


# --------------------------------------------------------------------------
# Point evaluation
# --------------------------------------------------------------------------

def evaluation_matrix(space: FESpace, points: np.ndarray, comp: int = 0,
                      derivative: int | None = None) -> sp.csr_matrix:
    """Sparse matrix mapping DOFs to values (or one partial derivative) at points.

    Parameters
    ----------
    points : ndarray, shape (n, 2)
        Points inside the space's region (the region's closure).
    comp : int
        Component to evaluate.
    derivative : {None, 0, 1}
        ``None`` for values, 0 for ``d/dx``, 1 for ``d/dy``.
    """
    pts = np.atleast_2d(points)
    tri, ref = space.mesh.locate_in_region(pts, space.region)
    cells = space.local_cells(tri)
    if np.any(cells < 0):
        raise AssemblyError("evaluation point outside the space's region")
    if derivative is None:
        vals, _ = _BASIS[space.degree](ref)
    else:
        _, g = _BASIS[space.degree](ref)
        p = space.mesh.nodes[space.mesh.triangles[tri]]
        J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
        invJ = np.linalg.inv(J)
        vals = np.einsum("nkj,nj->nk", g, invJ[:, :, derivative])
    cols = comp * space.n_scalar + space.dof_map[cells]
    rows = np.broadcast_to(np.arange(len(pts))[:, None], cols.shape)
    E = sp.coo_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=(len(pts), space.ndofs)).tocsr()
    E.sum_duplicates()
    return E


# --------------------------------------------------------------------------
# Linear systems
# --------------------------------------------------------------------------

@dataclass
class LinearSystem:
    """Sparse operator, right-hand side and the constraints already applied to them."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    constrained: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    label: str = "linear system"


def constrained_operator(matrix: sp.spmatrix, dofs: np.ndarray) -> sp.csr_matrix:
    """Operator with rows and columns of ``dofs`` replaced by identity."""
    n = matrix.shape[0]
    keep = np.ones(n)
    keep[dofs] = 0.0
    K = sp.diags(keep)
    out = (K @ matrix @ K + sp.diags(1.0 - keep)).tocsr()
    out.eliminate_zeros()
    out.sort_indices()
    return out


def constrained_rhs(matrix: sp.spmatrix, rhs: np.ndarray, dofs: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Right-hand side after symmetric elimination of known DOF values."""
    b = np.array(rhs, dtype=float)
    if len(dofs):
        known = np.zeros(matrix.shape[1])
        known[dofs] = values
        b -= matrix @ known
        b[dofs] = values
    return b


def apply_dirichlet(system: LinearSystem, dofs, values) -> LinearSystem:
    """Impose ``x[dofs] = values`` by symmetric elimination.

    Constrained rows and columns become identity; the contribution of the
    known values is moved to the right-hand side.
    """
    A = system.matrix
    n = A.shape[0]
    dofs = np.asarray(dofs, dtype=np.int64).ravel()
    values = np.broadcast_to(np.asarray(values, dtype=float), dofs.shape).copy()
    if A.shape[0] != A.shape[1]:
        raise AssemblyError("Dirichlet elimination needs a square matrix")
    if len(dofs) and (dofs.min() < 0 or dofs.max() >= n):
        raise AssemblyError(f"constrained DOF index out of range [0, {n})")
    dofs, first = np.unique(dofs, return_index=True)
    values = values[first]
    return LinearSystem(
        matrix=constrained_operator(A, dofs),
        rhs=constrained_rhs(A, system.rhs, dofs, values),
        constrained=np.concatenate([system.constrained, dofs]),
        values=np.concatenate([system.values, values]),
        label=system.label,
    )


RESIDUAL_TOL = 1e-9


class Factorization:
    """Sparse LU of a constrained operator, reused across right-hand sides.

    Each solve applies one step of iterative refinement and is checked against
    ``||A x - b|| <= tol * (||A||_F ||x|| + ||b||)``.
    """

    def __init__(self, matrix: sp.spmatrix, label: str = "linear system", tol: float = RESIDUAL_TOL):
        self.matrix = sp.csc_matrix(matrix)
        self.label = label
        self.tol = tol
        self.norm_f = float(np.sqrt(np.sum(self.matrix.data ** 2)))
        try:
            self._lu = spla.splu(self.matrix, permc_spec="COLAMD")
        except RuntimeError as exc:
            raise SolverError(f"{label}: factorization failed ({exc})", label=label) from exc

    def solve(self, rhs: np.ndarray, step: int | None = None) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        x = self._lu.solve(rhs)
        # one refinement sweep: the coupled operators mix entries of very different magnitude
        if np.all(np.isfinite(x)):
            x += self._lu.solve(rhs - self.matrix @ x)
        where = f"{self.label}" + ("" if step is None else f" at step {step}")
        if not np.all(np.isfinite(x)):
            raise SolverError(f"{where}: non-finite solution (singular matrix?)", step=step, label=self.label)
        r = np.linalg.norm(self.matrix @ x - rhs)
        bound = self.tol * (self.norm_f * np.linalg.norm(x) + np.linalg.norm(rhs))
        if r > bound and r > 1e-300:
            raise SolverError(f"{where}: residual {r:.3e} exceeds bound {bound:.3e}", step=step, label=self.label)
        return x


def solve(system: LinearSystem, step: int | None = None) -> np.ndarray:
    """Solve a constrained linear system with a sparse direct factorization."""
    A = system.matrix
    if A.shape[0] != A.shape[1]:
        raise AssemblyError("solve needs a square matrix")
    return Factorization(A, label=system.label).solve(system.rhs, step=step)


# --------------------------------------------------------------------------
# Trace-inverse constant
# --------------------------------------------------------------------------

def estimate_trace_inverse_constant(space: FESpace, constrained_tags: Sequence[str] = ("inlet_p", "outlet_p", "exterior"),
                                    h: float | None = None) -> float:
    """Largest quotient ``h ||psi||^2_Gamma / ||psi||^2_Omega`` over the discrete space.

    Parameters
    ----------
    space : FESpace
        Scalar space on the poroelastic region.
    constrained_tags : sequence of str
        Boundary tags on which functions of the space vanish.
    h : float, optional
        Cell size normal to the interface multiplying the quotient; defaults
        to the wall cell height ``r_p / ny_p``.

    Notes
    -----
    The generalized eigenproblem is restricted to DOFs that touch the
    interface, since functions without interface trace give zero quotient.
    """
    from .mesh import PORO

    if space.ncomp != 1 or space.region != PORO:
        raise AssemblyError("trace-inverse estimate needs a scalar space on the poro region")
    iface = space.boundary.get("interface", np.zeros(0, dtype=np.int64))
    if len(iface) == 0:
        raise AssemblyError("space has no interface DOFs")
    h = space.mesh.r_p / space.mesh.ny_p if h is None else float(h)
    M = assemble(space, space, ScalarMass(1.0))
    G = assemble_trace(space, space, TraceProduct())
    fixed = np.unique(np.concatenate([space.boundary[t] for t in constrained_tags])) if constrained_tags else np.zeros(0, int)
    free = np.setdiff1d(np.arange(space.n_scalar), fixed)
    if len(np.intersect1d(free, iface)) == 0:
        raise AssemblyError("every interface DOF is constrained")
    Mf = M[free][:, free]
    Gf = G[free][:, free]
    # Schur complement: maximize over interface values, interior values minimize the denominator
    on = np.isin(free, iface)
    Mii, Mib = Mf[~on][:, ~on], Mf[~on][:, on]
    Mbb = Mf[on][:, on].toarray()
    if Mii.shape[0]:
        S = Mbb - (Mib.T @ spla.splu(sp.csc_matrix(Mii)).solve(Mib.toarray()))
    else:
        S = Mbb
    Gb = Gf[on][:, on].toarray()
    from scipy.linalg import eigh

    lam = eigh(Gb, S, eigvals_only=True)
    return float(h * lam[-1])

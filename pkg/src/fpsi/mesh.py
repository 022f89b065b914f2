"""Structured conforming triangulation of the fluid channel and the poroelastic wall.

The fluid occupies ``(0, L) x (0, R)`` and the wall ``(0, L) x (R, R + r_p)``.
Both rectangles are covered by one tensor grid whose horizontal line
``y = R`` is shared, so the two triangulations match node-for-node on the
interface.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FLUID = 0
PORO = 1
REGION_NAMES = {FLUID: "fluid", PORO: "poro"}

BOUNDARY_TAGS = ("inlet_f", "outlet_f", "axis", "interface", "inlet_p", "outlet_p", "exterior")


class MeshError(ValueError):
    """Invalid mesh request or inconsistent mesh."""


@dataclass(frozen=True)
class BilayerMesh:
    """Triangulation of the bilayer reference geometry.

    Attributes
    ----------
    nodes : ndarray, shape (N, 2)
        Node coordinates in cm.
    triangles : ndarray, shape (T, 3)
        Counter-clockwise node triples.
    regions : ndarray, shape (T,)
        ``FLUID`` or ``PORO`` per triangle.
    boundary_edges : ndarray, shape (E, 2)
        Node pairs of tagged edges. Interface edges are listed once.
    boundary_tags : ndarray, shape (E,)
        Tag string per boundary edge, one of ``BOUNDARY_TAGS``.
    h : float
        ``max(L/nx, R/ny_f, r_p/ny_p)``.
    """

    L: float
    R: float
    r_p: float
    nx: int
    ny_f: int
    ny_p: int
    nodes: np.ndarray
    triangles: np.ndarray
    regions: np.ndarray
    boundary_edges: np.ndarray
    boundary_tags: np.ndarray
    h: float
    x_levels: np.ndarray = field(repr=False)
    y_levels: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def node_index(self, i, j):
        """Global node id of grid vertex ``(i, j)``."""
        return np.asarray(j) * (self.nx + 1) + np.asarray(i)

    def signed_areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def region_area(self, region: int) -> float:
        return float(self.signed_areas()[self.regions == region].sum())

    def edges_with_tag(self, tag: str) -> np.ndarray:
        if tag not in BOUNDARY_TAGS:
            raise MeshError(f"unknown boundary tag {tag!r}")
        return self.boundary_edges[self.boundary_tags == tag]

    def nodes_with_tag(self, tag: str) -> np.ndarray:
        return np.unique(self.edges_with_tag(tag))

    def max_cell_edge(self) -> float:
        """Longest axis-aligned triangle leg, measured from the coordinates."""
        p = self.nodes[self.triangles]
        lengths = []
        for a, b in ((0, 1), (1, 2), (2, 0)):
            d = p[:, b] - p[:, a]
            axis_aligned = (np.abs(d[:, 0]) < 1e-14) | (np.abs(d[:, 1]) < 1e-14)
            lengths.append(np.where(axis_aligned, np.hypot(d[:, 0], d[:, 1]), 0.0))
        return float(np.max(lengths))

    def locate(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Find the containing triangle and reference coordinates of each point.

        Points on shared edges are assigned deterministically to one of the
        neighbouring triangles; callers evaluating continuous fields are
        indifferent to the choice.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        x, y = pts[:, 0], pts[:, 1]
        tol = 1e-12 * max(self.L, self.R + self.r_p)
        if np.any((x < -tol) | (x > self.L + tol) | (y < -tol) | (y > self.R + self.r_p + tol)):
            raise MeshError("point outside the bilayer domain")
        i = np.clip(np.searchsorted(self.x_levels, x, side="right") - 1, 0, self.nx - 1)
        j = np.clip(np.searchsorted(self.y_levels, y, side="right") - 1, 0, self.ny_f + self.ny_p - 1)
        s = (x - self.x_levels[i]) / (self.x_levels[i + 1] - self.x_levels[i])
        t = (y - self.y_levels[j]) / (self.y_levels[j + 1] - self.y_levels[j])
        upper = t > s
        tri = 2 * (j * self.nx + i) + upper.astype(int)
        return tri, self.reference_coords(tri, pts)

    def locate_in_region(self, points: np.ndarray, region: int) -> tuple[np.ndarray, np.ndarray]:
        """Like :meth:`locate`, but points on ``y = R`` go to the requested side."""
        pts = np.array(np.atleast_2d(points), dtype=float)
        on_iface = np.abs(pts[:, 1] - self.R) <= 1e-12 * max(1.0, self.R)
        shift = 1e-9 * min(self.R / self.ny_f, self.r_p / self.ny_p)
        pts[on_iface, 1] = self.R - shift if region == FLUID else self.R + shift
        tri, _ = self.locate(pts)
        pts[on_iface, 1] = self.R
        return tri, self.reference_coords(tri, pts)

    def reference_coords(self, tri: np.ndarray, points: np.ndarray) -> np.ndarray:
        p = self.nodes[self.triangles[tri]]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        r = points - p[:, 0]
        xi = (r[:, 0] * d2[:, 1] - r[:, 1] * d2[:, 0]) / det
        eta = (d1[:, 0] * r[:, 1] - d1[:, 1] * r[:, 0]) / det
        return np.column_stack([xi, eta])


@dataclass(frozen=True)
class InterfaceMap:
    """Ordered interface nodes with their handles in each region's vertex numbering."""

    nodes: np.ndarray
    fluid_handles: np.ndarray
    poro_handles: np.ndarray
    x: np.ndarray

    def __len__(self) -> int:
        return len(self.nodes)


def build_mesh(L: float, R: float, r_p: float, nx: int, ny_f: int, ny_p: int) -> BilayerMesh:
    """Build the structured bilayer triangulation.

    Each grid cell is split by its lower-left to upper-right diagonal.
    """
    for name, val in (("L", L), ("R", R), ("r_p", r_p)):
        if not val > 0:
            raise MeshError(f"{name} must be positive, got {val}")
    for name, val in (("nx", nx), ("ny_f", ny_f), ("ny_p", ny_p)):
        if int(val) != val or val < 1:
            raise MeshError(f"{name} must be an integer >= 1, got {val}")
    nx, ny_f, ny_p = int(nx), int(ny_f), int(ny_p)

    xs = np.linspace(0.0, L, nx + 1)
    ys = np.concatenate([np.linspace(0.0, R, ny_f + 1), np.linspace(R, R + r_p, ny_p + 1)[1:]])
    ny = ny_f + ny_p
    X, Y = np.meshgrid(xs, ys)
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny))
    ii, jj = ii.ravel(), jj.ravel()
    a = jj * (nx + 1) + ii
    b = a + 1
    c = a + nx + 2
    d = a + nx + 1
    triangles = np.empty((2 * nx * ny, 3), dtype=np.int64)
    triangles[0::2] = np.column_stack([a, b, c])
    triangles[1::2] = np.column_stack([a, c, d])
    regions = np.repeat(np.where(jj < ny_f, FLUID, PORO), 2)

    def row_edges(j):
        base = j * (nx + 1) + np.arange(nx)
        return np.column_stack([base, base + 1])

    def col_edges(i, j0, j1):
        base = np.arange(j0, j1) * (nx + 1) + i
        return np.column_stack([base, base + nx + 1])

    groups = [
        ("inlet_f", col_edges(0, 0, ny_f)),
        ("outlet_f", col_edges(nx, 0, ny_f)),
        ("axis", row_edges(0)),
        ("interface", row_edges(ny_f)),
        ("inlet_p", col_edges(0, ny_f, ny)),
        ("outlet_p", col_edges(nx, ny_f, ny)),
        ("exterior", row_edges(ny)),
    ]
    boundary_edges = np.vstack([e for _, e in groups]).astype(np.int64)
    boundary_tags = np.concatenate([np.full(len(e), tag, dtype=object) for tag, e in groups])

    h = max(L / nx, R / ny_f, r_p / ny_p)
    mesh = BilayerMesh(
        L=float(L), R=float(R), r_p=float(r_p), nx=nx, ny_f=ny_f, ny_p=ny_p,
        nodes=nodes, triangles=triangles, regions=regions,
        boundary_edges=boundary_edges, boundary_tags=boundary_tags,
        h=float(h), x_levels=xs, y_levels=ys,
    )
    for arr in (nodes, triangles, regions, boundary_edges, boundary_tags, xs, ys):
        arr.setflags(write=False)
    return mesh


def region_vertices(mesh: BilayerMesh, region: int) -> np.ndarray:
    """Sorted global node ids used by triangles of ``region``."""
    return np.unique(mesh.triangles[mesh.regions == region])


def interface_trace(mesh: BilayerMesh) -> InterfaceMap:
    """Interface nodes ordered by x, with fluid- and poro-side vertex handles."""
    edges = mesh.edges_with_tag("interface")
    nodes = np.unique(edges)
    nodes = nodes[np.argsort(mesh.nodes[nodes, 0], kind="stable")]
    if np.any(np.abs(mesh.nodes[nodes, 1] - mesh.R) > 1e-12 * max(1.0, mesh.R)):
        raise MeshError("interface node off the line y = R")
    fv = region_vertices(mesh, FLUID)
    pv = region_vertices(mesh, PORO)
    f_handles = np.searchsorted(fv, nodes)
    p_handles = np.searchsorted(pv, nodes)
    ok_f = (f_handles < len(fv)) & (fv[np.minimum(f_handles, len(fv) - 1)] == nodes)
    ok_p = (p_handles < len(pv)) & (pv[np.minimum(p_handles, len(pv) - 1)] == nodes)
    if not (ok_f.all() and ok_p.all()):
        raise MeshError("non-conforming interface: node missing from one region")
    x = mesh.nodes[nodes, 0]
    if np.any(np.diff(x) <= 0) or abs(x[0]) > 1e-12 or abs(x[-1] - mesh.L) > 1e-12 * mesh.L:
        raise MeshError("interface arc coordinates are not strictly increasing over [0, L]")
    return InterfaceMap(nodes=nodes, fluid_handles=f_handles, poro_handles=p_handles, x=x)

"""Boxes, simplicial meshes, Haar cell grids and the two-domain mesh hierarchy."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

__all__ = [
    "Box",
    "SimplicialMesh",
    "HaarMesh",
    "MeshHierarchy",
    "build_uniform_mesh",
    "build_hierarchy",
    "haar_cell_index",
    "haar_cell_midpoint",
    "cell_volumes",
    "vertex_injection_map",
    "is_nested",
    "write_mesh",
    "read_mesh",
]

_COORD_TOL = 1e-12


@dataclass(frozen=True)
class Box:
    """Axis-aligned box [lo_1, hi_1] x ... x [lo_d, hi_d]."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        if len(self.lo) != len(self.hi):
            raise ValueError("lo and hi must have the same length")
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValueError("box must have positive extent along every axis")
        object.__setattr__(self, "lo", tuple(float(x) for x in self.lo))
        object.__setattr__(self, "hi", tuple(float(x) for x in self.hi))

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def sides(self) -> np.ndarray:
        return np.asarray(self.hi) - np.asarray(self.lo)

    @property
    def volume(self) -> float:
        return float(np.prod(self.sides))

    def to_unit(self, points: np.ndarray) -> np.ndarray:
        """Affine map of physical points onto the unit box [0,1]^d."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        return (p - np.asarray(self.lo)) / self.sides

    def from_unit(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        return p * self.sides + np.asarray(self.lo)

    def contains(self, points: np.ndarray, tol: float = _COORD_TOL) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        lo = np.asarray(self.lo) - tol
        hi = np.asarray(self.hi) + tol
        return np.all((p >= lo) & (p <= hi), axis=1)


@dataclass
class SimplicialMesh:
    """Conforming simplicial mesh: intervals in 1D, triangles in 2D.

    Cells are stored with canonical orientation (ascending endpoints in 1D,
    counter-clockwise vertex order in 2D) so signed volumes are positive.
    """

    dim: int
    vertices: np.ndarray  # (n_vertices, dim)
    cells: np.ndarray  # (n_cells, dim + 1) int
    boundary_vertices: np.ndarray  # sorted int indices

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.cells = np.asarray(self.cells, dtype=np.int64)
        self.boundary_vertices = np.asarray(self.boundary_vertices, dtype=np.int64)
        if self.dim not in (1, 2):
            raise ValueError("only dimensions 1 and 2 are supported")
        if self.vertices.ndim != 2 or self.vertices.shape[1] != self.dim:
            raise ValueError("vertices must have shape (n, dim)")
        if self.cells.ndim != 2 or self.cells.shape[1] != self.dim + 1:
            raise ValueError("cells must have shape (n, dim + 1)")
        self._orient()

    def _orient(self):
        V, C = self.vertices, self.cells
        if self.dim == 1:
            flip = V[C[:, 0], 0] > V[C[:, 1], 0]
            C[flip] = C[flip][:, ::-1]
        else:
            a, b, c = V[C[:, 0]], V[C[:, 1]], V[C[:, 2]]
            two_area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (
                b[:, 1] - a[:, 1]
            ) * (c[:, 0] - a[:, 0])
            if np.any(np.abs(two_area) <= 0.0):
                raise ValueError("degenerate cell in mesh")
            flip = two_area < 0
            C[flip] = C[flip][:, [0, 2, 1]]

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def interior_vertices(self) -> np.ndarray:
        mask = np.ones(self.n_vertices, dtype=bool)
        mask[self.boundary_vertices] = False
        return np.nonzero(mask)[0]

    def mesh_size(self) -> float:
        """Longest edge over all cells."""
        V, C = self.vertices, self.cells
        h = 0.0
        for i in range(self.dim + 1):
            for j in range(i + 1, self.dim + 1):
                e = V[C[:, i]] - V[C[:, j]]
                h = max(h, float(np.sqrt((e * e).sum(axis=1)).max()))
        return h


def cell_volumes(mesh: SimplicialMesh) -> np.ndarray:
    V, C = mesh.vertices, mesh.cells
    if mesh.dim == 1:
        return V[C[:, 1], 0] - V[C[:, 0], 0]
    a, b, c = V[C[:, 0]], V[C[:, 1]], V[C[:, 2]]
    return 0.5 * (
        (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
        - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    )


def build_uniform_mesh(
    box: Box, dim: int, n_per_axis: int, diagonal: str = "right"
) -> SimplicialMesh:
    """Uniform mesh of `box` with n_per_axis cells per axis.

    In 2D every grid square is split into two triangles along the chosen
    diagonal: "right" runs lower-left to upper-right, "left" the other way.
    """
    if dim != box.dim:
        raise ValueError("dim does not match box dimension")
    if n_per_axis < 1:
        raise ValueError("n_per_axis must be >= 1")
    if diagonal not in ("left", "right"):
        raise ValueError("diagonal must be 'left' or 'right'")
    n = n_per_axis
    if dim == 1:
        x = np.linspace(box.lo[0], box.hi[0], n + 1)
        vertices = x[:, None]
        cells = np.column_stack([np.arange(n), np.arange(1, n + 1)])
        boundary = np.array([0, n])
        return SimplicialMesh(1, vertices, cells, boundary)

    x = np.linspace(box.lo[0], box.hi[0], n + 1)
    y = np.linspace(box.lo[1], box.hi[1], n + 1)
    X, Y = np.meshgrid(x, y, indexing="ij")
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return i * (n + 1) + j

    cells = []
    for i in range(n):
        for j in range(n):
            a = vid(i, j)
            b = vid(i + 1, j)
            c = vid(i + 1, j + 1)
            d = vid(i, j + 1)
            if diagonal == "right":
                cells.append((a, b, c))
                cells.append((a, c, d))
            else:
                cells.append((a, b, d))
                cells.append((b, c, d))
    ii, jj = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    on_bd = (ii == 0) | (ii == n) | (jj == 0) | (jj == n)
    boundary = np.nonzero(on_bd.ravel())[0]
    return SimplicialMesh(2, vertices, np.asarray(cells), boundary)


@dataclass(frozen=True)
class HaarMesh:
    """Uniform dyadic grid of 2^(d(level+1)) cells covering `box`.

    level = -1 is the single-cell grid. Cells are indexed in C order over the
    per-axis indices (last axis fastest).
    """

    level: int
    dim: int
    box: Box

    def __post_init__(self):
        if self.level < -1:
            raise ValueError("Haar level must be >= -1")
        if self.dim != self.box.dim:
            raise ValueError("dim does not match box dimension")

    @property
    def cells_per_axis(self) -> int:
        return 1 << (self.level + 1)

    @property
    def n_cells(self) -> int:
        return self.cells_per_axis**self.dim

    @property
    def cell_volume(self) -> float:
        return self.box.volume / self.n_cells

    def axis_breaks(self, axis: int) -> np.ndarray:
        return np.linspace(self.box.lo[axis], self.box.hi[axis], self.cells_per_axis + 1)


def haar_cell_index(haar: HaarMesh, points: np.ndarray) -> np.ndarray:
    """Flat cell index of each point; points on the upper boundary are clamped
    into the last cell along that axis."""
    if not np.all(haar.box.contains(points)):
        raise ValueError("point outside the Haar grid's box")
    u = haar.box.to_unit(points)
    n = haar.cells_per_axis
    idx = np.floor(u * n).astype(np.int64)
    np.clip(idx, 0, n - 1, out=idx)
    flat = idx[:, 0]
    for a in range(1, haar.dim):
        flat = flat * n + idx[:, a]
    return flat


def haar_cell_midpoint(haar: HaarMesh, k) -> np.ndarray:
    """Physical midpoint(s) of cell(s) k."""
    k = np.atleast_1d(np.asarray(k, dtype=np.int64))
    if np.any(k < 0) or np.any(k >= haar.n_cells):
        raise IndexError("Haar cell index out of range")
    n = haar.cells_per_axis
    axes = []
    rem = k.copy()
    for _ in range(haar.dim):
        axes.append(rem % n)
        rem //= n
    axes = axes[::-1]  # first axis is the most significant digit
    unit = np.column_stack([(a + 0.5) / n for a in axes])
    return haar.box.from_unit(unit)


def vertex_injection_map(
    sub: SimplicialMesh, sup: SimplicialMesh, tol: float = _COORD_TOL
) -> np.ndarray:
    """Index map m with sup.vertices[m[i]] == sub.vertices[i] up to tol.

    Raises ValueError if some vertex of `sub` has no match in `sup`.
    """
    decimals = max(0, int(-np.log10(tol)))
    lookup = {}
    for j, v in enumerate(np.round(sup.vertices, decimals)):
        lookup[tuple(v)] = j
    out = np.empty(sub.n_vertices, dtype=np.int64)
    for i, v in enumerate(np.round(sub.vertices, decimals)):
        key = tuple(v)
        if key not in lookup:
            raise ValueError(f"vertex {sub.vertices[i]} has no counterpart")
        out[i] = lookup[key]
    return out


def is_nested(sub: SimplicialMesh, sup: SimplicialMesh, tol: float = _COORD_TOL) -> bool:
    """True when every cell of `sub` coincides with a cell of `sup`.

    This is the strict notion used for the inner/outer pair of the test
    problem, where the two meshes share spacing and diagonal direction over
    the inner domain; transfer between them is then an exact injection.
    """
    try:
        vmap = vertex_injection_map(sub, sup, tol)
    except ValueError:
        return False
    decimals = max(0, int(-np.log10(tol)))

    def cell_key(mesh, cell):
        pts = np.round(mesh.vertices[cell], decimals)
        return tuple(sorted(map(tuple, pts)))

    sup_cells = {cell_key(sup, c) for c in sup.cells}
    return all(cell_key(sub, c) in sup_cells for c in sub.cells)


@dataclass
class MeshHierarchy:
    """Per-level triple (inner mesh on G, outer mesh on D, Haar grid on D)."""

    g_box: Box
    d_box: Box
    levels: list  # entries (g_mesh, d_mesh, haar)
    level_indices: list  # the integer level of each entry
    injections: list = field(default_factory=list)  # G vertex -> D vertex maps

    def __post_init__(self):
        if not self.injections:
            self.injections = [
                vertex_injection_map(g, d) for g, d, _ in self.levels
            ]
        for g, d, _ in self.levels:
            if not is_nested(g, d):
                raise ValueError("inner mesh is not nested in the outer mesh")
        haar_levels = [h.level for _, _, h in self.levels]
        if any(b < a for a, b in zip(haar_levels, haar_levels[1:])):
            raise ValueError("Haar levels must be non-decreasing across the hierarchy")

    @property
    def n_levels(self) -> int:
        return len(self.levels)


def hierarchy_diagonal(level: int) -> str:
    # Alternate per level so consecutive outer meshes are never nested in one
    # another while each inner mesh still matches its own outer mesh.
    return "right" if level % 2 == 1 else "left"


def build_hierarchy(
    g_box: Box,
    d_box: Box,
    dim: int,
    level_indices: list,
    haar_levels: list,
) -> MeshHierarchy:
    """Uniform hierarchy: level ell has 2^ell cells/axis on G and 2^(ell+1)
    on D, matching spacings so G is nested in D; the split diagonal
    alternates between consecutive levels."""
    if len(level_indices) != len(haar_levels):
        raise ValueError("level_indices and haar_levels must align")
    if any(ell < 1 for ell in level_indices):
        raise ValueError("hierarchy levels start at 1")
    levels = []
    for ell, lcal in zip(level_indices, haar_levels):
        diag = hierarchy_diagonal(ell)
        g = build_uniform_mesh(g_box, dim, 2**ell, diagonal=diag)
        d = build_uniform_mesh(d_box, dim, 2 ** (ell + 1), diagonal=diag)
        levels.append((g, d, HaarMesh(lcal, dim, d_box)))
    return MeshHierarchy(g_box, d_box, levels, list(level_indices))


def write_mesh(mesh: SimplicialMesh, path) -> None:
    """Plain-text dump: header `dim n_vertices n_cells`, vertex lines, cell lines."""
    with open(path, "w") as f:
        f.write(f"{mesh.dim} {mesh.n_vertices} {mesh.n_cells}\n")
        for v in mesh.vertices:
            f.write(" ".join(repr(float(x)) for x in v) + "\n")
        for c in mesh.cells:
            f.write(" ".join(str(int(i)) for i in c) + "\n")


def read_mesh(path) -> SimplicialMesh:
    with open(path) as f:
        dim, nv, nc = map(int, f.readline().split())
        vertices = np.array(
            [[float(t) for t in f.readline().split()] for _ in range(nv)]
        )
        cells = np.array([[int(t) for t in f.readline().split()] for _ in range(nc)])
    verts = vertices.reshape(nv, dim)
    # Boundary detection: facets incident to exactly one cell.
    if dim == 1:
        counts = np.zeros(nv, dtype=int)
        for a, b in cells:
            counts[a] += 1
            counts[b] += 1
        boundary = np.nonzero(counts == 1)[0]
    else:
        from collections import Counter

        edges = Counter()
        for tri in cells:
            for i in range(3):
                e = tuple(sorted((tri[i], tri[(i + 1) % 3])))
                edges[e] += 1
        bset = set()
        for (a, b), cnt in edges.items():
            if cnt == 1:
                bset.update((a, b))
        boundary = np.array(sorted(bset), dtype=np.int64)
    return SimplicialMesh(dim, verts, cells, boundary)

"""Structured P1 meshes of the perforated cell Y* and the perforated square.

Cells of the background grid are split along alternating diagonals (the
diagonal of grid cell (i, j) runs "/" when i + j is even, "\\" otherwise), so
every mesh is invariant under the reflections y1 -> 1 - y1, y2 -> 1 - y2 and
the swap y1 <-> y2 whenever the hole is.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Optional

import numpy as np

FORMAT_HEADER = "steklovmesh 1"
DEFAULT_MAX_DOFS = 200_000


class Tag(IntEnum):
    HOLE = 1
    DIRICHLET = 2
    FACE_LEFT = 3
    FACE_RIGHT = 4
    FACE_BOTTOM = 5
    FACE_TOP = 6


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class CellGeometry:
    hole_kind: str = "square"  # "none" | "square" | "disk"
    hole_center: tuple = (0.5, 0.5)
    hole_size: float = 0.5  # square side, or disk radius
    m: int = 8

    def bbox(self):
        cx, cy = self.hole_center
        h = self.hole_size / 2 if self.hole_kind == "square" else self.hole_size
        return cx - h, cx + h, cy - h, cy + h

    def validate(self):
        if self.hole_kind not in ("none", "square", "disk"):
            raise MeshError(f"unknown hole kind {self.hole_kind!r}")
        m = self.m
        if m < 2 or m % 2:
            raise MeshError(f"subdivisions m must be even and >= 2, got {m}")
        if self.hole_kind == "none":
            return
        if m < 8:
            raise MeshError(f"m={m} too small to resolve a hole (need m >= 8)")
        if not self.hole_size > 0:
            raise MeshError("hole size must be positive")
        x0, x1, y0, y1 = self.bbox()
        delta = 1.0 / m
        tol = 1e-12
        if min(x0, y0) < delta - tol or max(x1, y1) > 1 - delta + tol:
            raise MeshError(
                f"hole must stay at least 1/m = {delta:g} away from the cell faces "
                f"(bounding box [{x0:g},{x1:g}]x[{y0:g},{y1:g}])"
            )
        if self.hole_kind == "square":
            for v in (x0, x1, y0, y1):
                if abs(v * m - round(v * m)) > 1e-9:
                    raise MeshError("square hole edges must lie on the grid (multiples of 1/m)")
        if self.hole_kind == "disk" and self.hole_size * m < 1.0:
            raise MeshError(f"m={m} too small to resolve a disk of radius {self.hole_size:g}")

    @property
    def hole_area(self) -> float:
        if self.hole_kind == "none":
            return 0.0
        if self.hole_kind == "square":
            return self.hole_size**2
        return math.pi * self.hole_size**2

    def to_dict(self) -> dict:
        return {
            "hole_kind": self.hole_kind,
            "hole_center": list(self.hole_center),
            "hole_size": self.hole_size,
            "m": self.m,
        }


@dataclass(frozen=True)
class EpsilonLevel:
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise MeshError("epsilon level needs n >= 1")

    @property
    def eps(self) -> float:
        return 1.0 / self.n


@dataclass(eq=False)
class Mesh:
    nodes: np.ndarray  # (N, 2) float
    triangles: np.ndarray  # (M, 3) int, counter-clockwise
    bedges: np.ndarray  # (K, 3) int: a, b, tag
    ppairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __post_init__(self):
        self.nodes = np.ascontiguousarray(self.nodes, dtype=float).reshape(-1, 2)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        self.bedges = np.ascontiguousarray(self.bedges, dtype=np.int64).reshape(-1, 3)
        self.ppairs = np.ascontiguousarray(self.ppairs, dtype=np.int64).reshape(-1, 2)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def edges_with_tag(self, *tags) -> np.ndarray:
        mask = np.isin(self.bedges[:, 2], [int(t) for t in tags])
        return self.bedges[mask, :2]

    def areas(self) -> np.ndarray:
        return signed_areas(self.nodes, self.triangles)

    def all_edges(self) -> np.ndarray:
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def hole_loops(self) -> list[list[int]]:
        return _loops(self.edges_with_tag(Tag.HOLE))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in (self.nodes, self.triangles, self.bedges, self.ppairs):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]

    def validate(self) -> "Mesh":
        validate_mesh(self)
        return self


def signed_areas(nodes: np.ndarray, tris: np.ndarray) -> np.ndarray:
    p0, p1, p2 = nodes[tris[:, 0]], nodes[tris[:, 1]], nodes[tris[:, 2]]
    d1 = p1 - p0
    d2 = p2 - p0
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _loops(edges: np.ndarray) -> list[list[int]]:
    """Split an edge set into closed loops; raise if some node is not of degree 2."""
    if len(edges) == 0:
        return []
    adj: dict[int, list[int]] = {}
    for a, b in edges.tolist():
        adj.setdefault(a, []).append(b)
        adj.setdefault(b, []).append(a)
    bad = [v for v, nb in adj.items() if len(nb) != 2]
    if bad:
        raise MeshError(f"hole boundary is not a union of closed loops (node {bad[0]})")
    seen: set[int] = set()
    loops = []
    for start in sorted(adj):
        if start in seen:
            continue
        loop = [start]
        seen.add(start)
        prev, cur = start, adj[start][0]
        while cur != start:
            loop.append(cur)
            seen.add(cur)
            nb = adj[cur]
            prev, cur = cur, nb[0] if nb[0] != prev else nb[1]
        loops.append(loop)
    return loops


def _boundary_edges(tris: np.ndarray) -> np.ndarray:
    """Edges used by exactly one triangle, oriented as in that triangle."""
    e = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    key = np.sort(e, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    if np.any(counts > 2):
        raise MeshError("non-conforming mesh: an edge is shared by more than two triangles")
    return e[counts[inv] == 1]


def validate_mesh(mesh: Mesh) -> None:
    nodes, tris = mesh.nodes, mesh.triangles
    n = len(nodes)
    if n == 0 or len(tris) == 0:
        raise MeshError("empty mesh")
    if not np.all(np.isfinite(nodes)):
        raise MeshError("non-finite node coordinates")
    for arr, what in ((tris, "triangle"), (mesh.bedges[:, :2], "boundary edge"), (mesh.ppairs, "periodic pair")):
        if arr.size and (arr.min() < 0 or arr.max() >= n):
            raise MeshError(f"{what} references a missing node")
    area = signed_areas(nodes, tris)
    if np.any(area <= 0):
        i = int(np.argmin(area))
        raise MeshError(f"triangle {i} has non-positive signed area {area[i]:g}")
    used = np.zeros(n, dtype=bool)
    used[tris.ravel()] = True
    if not used.all():
        raise MeshError(f"orphan node {int(np.argmin(used))}")
    bnd = np.sort(_boundary_edges(tris), axis=1)
    listed = np.sort(mesh.bedges[:, :2], axis=1)
    if len(bnd) != len(listed) or not np.array_equal(
        np.unique(bnd, axis=0), np.unique(listed, axis=0)
    ):
        raise MeshError("boundary edge list does not match the triangulation boundary")
    if not np.all(np.isin(mesh.bedges[:, 2], [int(t) for t in Tag])):
        raise MeshError("unknown boundary tag")
    if len(mesh.ppairs):
        d = nodes[mesh.ppairs[:, 0]] - nodes[mesh.ppairs[:, 1]]
        ok = (np.abs(d - [1.0, 0.0]).max(axis=1) <= 1e-12) | (np.abs(d - [0.0, 1.0]).max(axis=1) <= 1e-12)
        if not ok.all():
            raise MeshError(f"periodic pair {int(np.argmin(ok))} does not differ by (1,0) or (0,1)")
        if len(np.unique(mesh.ppairs[:, 0])) != len(mesh.ppairs):
            raise MeshError("a node is slaved twice")
    _loops(mesh.edges_with_tag(Tag.HOLE))


# ------------------------------------------------------------- cell meshes


def _grid_triangles(m: int, keep: np.ndarray) -> np.ndarray:
    """Criss-cross triangulation of the kept cells of an m x m grid."""
    i, j = np.nonzero(keep)
    p00 = i + (m + 1) * j
    p10 = p00 + 1
    p01 = p00 + (m + 1)
    p11 = p01 + 1
    slash = (i + j) % 2 == 0
    t1 = np.where(slash[:, None], np.stack([p00, p10, p11], 1), np.stack([p00, p10, p01], 1))
    t2 = np.where(slash[:, None], np.stack([p00, p11, p01], 1), np.stack([p10, p11, p01], 1))
    tris = np.empty((2 * len(i), 3), dtype=np.int64)
    tris[0::2] = t1
    tris[1::2] = t2
    return tris


def _hole_cells(g: CellGeometry) -> np.ndarray:
    m = g.m
    c = (np.arange(m) + 0.5) / m
    CX, CY = np.meshgrid(c, c, indexing="ij")
    if g.hole_kind == "none":
        return np.zeros((m, m), dtype=bool)
    if g.hole_kind == "square":
        x0, x1, y0, y1 = g.bbox()
        return (CX > x0) & (CX < x1) & (CY > y0) & (CY < y1)
    cx, cy = g.hole_center
    return (CX - cx) ** 2 + (CY - cy) ** 2 < g.hole_size**2


def build_cell_mesh(g: CellGeometry) -> Mesh:
    """Triangulate Y* = [0,1]^2 minus the hole, with faces tagged and periodic pairs."""
    g.validate()
    m = g.m
    hole = _hole_cells(g)
    if g.hole_kind != "none" and hole.sum() < 4:
        raise MeshError(f"m={m} too small to resolve the hole (only {int(hole.sum())} grid cells removed)")
    tris = _grid_triangles(m, ~hole)
    t = np.arange(m + 1) / m
    X, Y = np.meshgrid(t, t, indexing="xy")
    nodes = np.stack([X.ravel(), Y.ravel()], axis=1)

    used = np.zeros(len(nodes), dtype=bool)
    used[tris.ravel()] = True
    new_index = np.cumsum(used) - 1
    nodes = nodes[used]
    tris = new_index[tris]

    if g.hole_kind == "disk":
        nodes, tris = _project_disk_boundary(g, nodes, tris)
    bedges = _boundary_edges(tris)
    tags = _tag_cell_edges(nodes, bedges)

    ppairs = _periodic_pairs(nodes)
    mesh = Mesh(nodes, tris, np.column_stack([bedges, tags]), ppairs)
    mesh.validate()
    return mesh


def _project_disk_boundary(g: CellGeometry, nodes: np.ndarray, tris: np.ndarray):
    """Move hole-boundary nodes radially onto the circle.

    Triangles that would become slivers (area below a fifth of a grid
    half-cell) are absorbed into the hole first, until the projection is clean.
    """
    center = np.asarray(g.hole_center, dtype=float)
    min_area = 0.2 * 0.5 / g.m**2
    while True:
        bedges = _boundary_edges(tris)
        hole_nodes = np.unique(bedges[_tag_cell_edges(nodes, bedges) == Tag.HOLE].ravel())
        moved = nodes.copy()
        d = nodes[hole_nodes] - center
        moved[hole_nodes] = center + d * (g.hole_size / np.hypot(d[:, 0], d[:, 1]))[:, None]
        area = signed_areas(moved, tris)
        bad = area < min_area
        if not bad.any():
            break
        tris = tris[~bad]
    used = np.zeros(len(nodes), dtype=bool)
    used[tris.ravel()] = True
    new_index = np.cumsum(used) - 1
    return moved[used], new_index[tris]


def _tag_cell_edges(nodes: np.ndarray, bedges: np.ndarray) -> np.ndarray:
    pa, pb = nodes[bedges[:, 0]], nodes[bedges[:, 1]]
    tags = np.full(len(bedges), int(Tag.HOLE), dtype=np.int64)
    for axis, val, tag in ((0, 0.0, Tag.FACE_LEFT), (0, 1.0, Tag.FACE_RIGHT), (1, 0.0, Tag.FACE_BOTTOM), (1, 1.0, Tag.FACE_TOP)):
        on = (pa[:, axis] == val) & (pb[:, axis] == val)
        tags[on] = int(tag)
    return tags


def _periodic_pairs(nodes: np.ndarray) -> np.ndarray:
    index = {(round(x * 1e12), round(y * 1e12)): i for i, (x, y) in enumerate(nodes.tolist())}
    pairs = []
    for i, (x, y) in enumerate(nodes.tolist()):
        if x == 1.0:
            pairs.append((i, index[(0, round(y * 1e12))]))
        elif y == 1.0:
            pairs.append((i, index[(round(x * 1e12), 0)]))
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


# -------------------------------------------------------- perforated square


def build_perforated_domain_mesh(
    g: CellGeometry, lvl: EpsilonLevel, max_dofs: int = DEFAULT_MAX_DOFS, cell: Optional[Mesh] = None
) -> Mesh:
    """Tile n x n scaled copies of the cell mesh over the unit square.

    Hole boundaries keep tag HOLE; the outer square is tagged DIRICHLET.
    """
    if g.hole_kind == "none":
        raise MeshError("the perforated domain needs a hole")
    cell = build_cell_mesh(g) if cell is None else cell
    n = lvl.n
    if n * n * cell.n_nodes > max_dofs:
        raise MeshError(f"n={n}: about {n * n * cell.n_nodes} nodes exceed the budget of {max_dofs}")
    nc = cell.n_nodes
    kx, ky = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    shifts = np.stack([kx.ravel(), ky.ravel()], axis=1).astype(float)
    coords = ((cell.nodes[None, :, :] + shifts[:, None, :]) / n).reshape(-1, 2)
    keys = np.round(coords * 1e12).astype(np.int64)
    _, first, inv = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inv = inv.ravel()
    # number merged nodes in order of first appearance
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    node_id = rank[inv]
    nodes = coords[first[order]]
    offsets = (np.arange(n * n) * nc)[:, None, None]
    tris = node_id[(cell.triangles[None, :, :] + offsets).reshape(-1, 3)]

    bedges = _boundary_edges(tris)
    pa, pb = nodes[bedges[:, 0]], nodes[bedges[:, 1]]
    outer = np.zeros(len(bedges), dtype=bool)
    for axis in (0, 1):
        for val in (0.0, 1.0):
            outer |= (pa[:, axis] == val) & (pb[:, axis] == val)
    tags = np.where(outer, int(Tag.DIRICHLET), int(Tag.HOLE))
    mesh = Mesh(nodes, tris, np.column_stack([bedges, tags]))
    mesh.validate()
    return mesh


def build_square_mesh(m: int) -> Mesh:
    """Uniform criss-cross mesh of the unit square with DIRICHLET boundary."""
    mesh = build_cell_mesh(CellGeometry("none", m=m))
    b = mesh.bedges.copy()
    b[:, 2] = int(Tag.DIRICHLET)
    return Mesh(mesh.nodes, mesh.triangles, b)


def build_disk_mesh(radius: float = 1.0, rings: int = 40, center=(0.0, 0.0)) -> Mesh:
    """Ring mesh of a disk: ring i carries 6i equally spaced nodes.

    The whole circle is tagged HOLE (a Steklov boundary); the outer polygon is
    the regular 6*rings-gon inscribed in the circle.
    """
    if rings < 1:
        raise MeshError("need at least one ring")
    pts = [(0.0, 0.0)]
    start = [0]
    for i in range(1, rings + 1):
        start.append(len(pts))
        th = 2 * np.pi * np.arange(6 * i) / (6 * i)
        r = radius * i / rings
        pts.extend(zip(r * np.cos(th), r * np.sin(th)))
    tris = []
    for i in range(1, rings + 1):
        outer_n = 6 * i
        inner_n = max(6 * (i - 1), 1)
        outer = [start[i] + k for k in range(outer_n)]
        inner = [start[i - 1] + k for k in range(inner_n)]
        if i == 1:
            for k in range(outer_n):
                tris.append((0, outer[k], outer[(k + 1) % outer_n]))
            continue
        # zipper between rings by angle
        a, b = 0, 0
        while a < outer_n or b < inner_n:
            ta = (a + 1) / outer_n
            tb = (b + 1) / inner_n
            if b >= inner_n or (a < outer_n and ta <= tb):
                tris.append((inner[b % inner_n], outer[a % outer_n], outer[(a + 1) % outer_n]))
                a += 1
            else:
                tris.append((inner[b % inner_n], outer[a % outer_n], inner[(b + 1) % inner_n]))
                b += 1
    nodes = np.array(pts) + np.asarray(center, dtype=float)
    tris = np.array(tris, dtype=np.int64)
    bedges = _boundary_edges(tris)
    mesh = Mesh(nodes, tris, np.column_stack([bedges, np.full(len(bedges), int(Tag.HOLE))]))
    mesh.validate()
    return mesh


def mirror_mesh(mesh: Mesh, axis: int = 0) -> Mesh:
    """Reflect a cell mesh across y_axis = 1/2 (orientation and tags fixed up)."""
    nodes = mesh.nodes.copy()
    nodes[:, axis] = 1.0 - nodes[:, axis]
    tris = mesh.triangles[:, [0, 2, 1]]
    swap = {0: {Tag.FACE_LEFT: Tag.FACE_RIGHT, Tag.FACE_RIGHT: Tag.FACE_LEFT},
            1: {Tag.FACE_BOTTOM: Tag.FACE_TOP, Tag.FACE_TOP: Tag.FACE_BOTTOM}}[axis]
    b = mesh.bedges.copy()
    b[:, 2] = [int(swap.get(Tag(t), Tag(t))) for t in b[:, 2]]
    ppairs = _periodic_pairs(nodes) if len(mesh.ppairs) else None
    return Mesh(nodes, tris, b, ppairs if ppairs is not None else np.zeros((0, 2))).validate()


# -------------------------------------------------------------------- I/O


def mesh_write(mesh: Mesh, path) -> None:
    lines = [FORMAT_HEADER, f"nodes {mesh.n_nodes}"]
    lines += [f"{i} {x:.17g} {y:.17g}" for i, (x, y) in enumerate(mesh.nodes.tolist())]
    lines.append(f"tris {len(mesh.triangles)}")
    lines += [f"{i} {a} {b} {c}" for i, (a, b, c) in enumerate(mesh.triangles.tolist())]
    lines.append(f"bedges {len(mesh.bedges)}")
    lines += [f"{i} {a} {b} {t}" for i, (a, b, t) in enumerate(mesh.bedges.tolist())]
    lines.append(f"ppairs {len(mesh.ppairs)}")
    lines += [f"{s} {m}" for s, m in mesh.ppairs.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def mesh_read(path) -> Mesh:
    text = Path(path).read_text().splitlines()
    it = iter(enumerate(text, start=1))

    def next_line():
        for lineno, line in it:
            if line.strip():
                return lineno, line.split()
        raise MeshError("unexpected end of mesh file")

    lineno, words = next_line()
    if " ".join(words) != FORMAT_HEADER:
        raise MeshError(f"line {lineno}: expected header {FORMAT_HEADER!r}")

    def section(name, width, conv):
        lineno, words = next_line()
        if len(words) != 2 or words[0] != name:
            raise MeshError(f"line {lineno}: expected '{name} <count>'")
        count = int(words[1])
        rows = []
        for k in range(count):
            lineno, words = next_line()
            if len(words) != width:
                raise MeshError(f"line {lineno}: expected {width} fields")
            try:
                fields = words if name == "ppairs" else words[1:]
                rows.append([conv(w) for w in fields])
            except ValueError as exc:
                raise MeshError(f"line {lineno}: {exc}") from None
            if name != "ppairs" and int(words[0]) != k:
                raise MeshError(f"line {lineno}: expected index {k}")
        return rows

    nodes = section("nodes", 3, float)
    tris = section("tris", 4, int)
    bedges = section("bedges", 4, int)
    ppairs = section("ppairs", 2, int)
    mesh = Mesh(np.array(nodes, dtype=float), np.array(tris), np.array(bedges), np.array(ppairs))
    mesh.validate()
    return mesh

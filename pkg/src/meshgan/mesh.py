"""Triangle mesh container, per-topology adjacency and OBJ I/O."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

__all__ = [
    "MeshError",
    "MeshParseError",
    "DegenerateFaceError",
    "Topology",
    "Mesh",
    "MeshGeometry",
    "compute_geometry",
    "load_mesh",
    "save_mesh",
    "vertex_normals",
]

DEGENERATE_AREA = 1e-12


class MeshError(ValueError):
    """Invalid mesh connectivity or geometry."""


class MeshParseError(MeshError):
    def __init__(self, path, lineno: int, message: str):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{self.path}:{lineno}: {message}")


class DegenerateFaceError(MeshError):
    def __init__(self, face: int, area: float):
        self.face = face
        self.area = area
        super().__init__(f"degenerate face {face}: area {area:.3e} mm^2 below {DEGENERATE_AREA:g}")


class Topology:
    """Edge structure of a face list, shared by every embedding of it.

    Attributes
    ----------
    edges : (E, 2) int array
        Undirected edges as sorted vertex pairs, lexicographically ordered.
    edge_faces : (E, 2) int array
        Adjacent faces per edge; ``-1`` in the second column marks a
        boundary edge.
    face_edges : (m, 3) int array
        ``face_edges[f, c]`` is the edge opposite corner ``c`` of face ``f``.
    """

    def __init__(self, faces: np.ndarray, n_vertices: int):
        faces = np.asarray(faces, dtype=np.int64)
        self.n_vertices = int(n_vertices)
        self.faces = faces
        m = len(faces)
        # edge opposite corner c joins corners c+1 and c+2
        a = faces[:, [1, 2, 0]].ravel()
        b = faces[:, [2, 0, 1]].ravel()
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        keys = lo * self.n_vertices + hi
        uniq, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
        if np.any(counts > 2):
            bad = uniq[counts > 2][0]
            raise MeshError(
                f"non-manifold edge ({bad // self.n_vertices}, {bad % self.n_vertices}) "
                f"shared by {counts[counts > 2][0]} faces"
            )
        # directed half-edges must be unique for a consistently oriented surface
        directed = a * self.n_vertices + b
        if len(np.unique(directed)) != len(directed):
            raise MeshError("inconsistent face orientation: a directed edge appears twice")
        self.edges = np.stack([uniq // self.n_vertices, uniq % self.n_vertices], axis=1)
        self.face_edges = inverse.reshape(m, 3)
        face_ids = np.repeat(np.arange(m), 3)
        order = np.argsort(inverse, kind="stable")
        edge_faces = np.full((len(uniq), 2), -1, dtype=np.int64)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        edge_faces[:, 0] = face_ids[order[starts]]
        two = counts == 2
        edge_faces[two, 1] = face_ids[order[starts[two] + 1]]
        self.edge_faces = edge_faces

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        return self.edge_faces[:, 1] < 0

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.edges[self.boundary_mask].ravel()] = True
        return mask

    @cached_property
    def neighbors(self) -> list[np.ndarray]:
        nbrs: list[list[int]] = [[] for _ in range(self.n_vertices)]
        for i, j in self.edges:
            nbrs[i].append(int(j))
            nbrs[j].append(int(i))
        return [np.array(sorted(n), dtype=np.int64) for n in nbrs]

    def euler_characteristic(self) -> int:
        return self.n_vertices - self.n_edges + len(self.faces)


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangle mesh with immutable connectivity.

    ``vertices`` is an (n, 3) float array in mm, ``faces`` an (m, 3) array of
    counter-clockwise vertex indices. Use :meth:`with_vertices` to build a new
    embedding of the same connectivity without recomputing adjacency.
    """

    vertices: np.ndarray
    faces: np.ndarray
    _topology: Topology | None = field(default=None, repr=False)

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64)
        f = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must be (n, 3), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise MeshError("vertex coordinates must be finite")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise MeshError(f"face index out of range [0, {len(v)})")
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            bad = int(np.flatnonzero((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2]))[0])
            raise MeshError(f"face {bad} repeats a vertex index: {f[bad].tolist()}")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        topo = self._topology
        if topo is None or topo.n_vertices != len(v) or not np.array_equal(topo.faces, f):
            topo = Topology(f, len(v))
        object.__setattr__(self, "_topology", topo)

    @property
    def topology(self) -> Topology:
        return self._topology

    @property
    def n(self) -> int:
        return len(self.vertices)

    @property
    def m(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices: np.ndarray) -> Mesh:
        vertices = np.asarray(vertices, dtype=np.float64)
        if vertices.shape != self.vertices.shape:
            raise MeshError(f"expected vertices of shape {self.vertices.shape}, got {vertices.shape}")
        return Mesh(vertices, self.faces, self._topology)

    def same_topology(self, other: Mesh) -> bool:
        return self.n == other.n and np.array_equal(self.faces, other.faces)


@dataclass(frozen=True)
class MeshGeometry:
    """Metric quantities of one embedding.

    ``edge_lengths`` follows ``Topology.edges`` order; ``vertex_areas`` are
    one third of the summed areas of incident faces.
    """

    edge_lengths: np.ndarray
    face_areas: np.ndarray
    vertex_areas: np.ndarray
    # squared length of the edge opposite each face corner
    corner_opposite_sq: np.ndarray = field(repr=False)


def compute_geometry(mesh: Mesh) -> MeshGeometry:
    v = mesh.vertices
    f = mesh.faces
    topo = mesh.topology
    e = topo.edges
    lengths = np.linalg.norm(v[e[:, 0]] - v[e[:, 1]], axis=1)
    cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    small = np.flatnonzero(areas < DEGENERATE_AREA)
    if len(small):
        raise DegenerateFaceError(int(small[0]), float(areas[small[0]]))
    vertex_areas = np.bincount(f.ravel(), weights=np.repeat(areas / 3.0, 3), minlength=mesh.n)
    opp_sq = lengths[topo.face_edges] ** 2
    return MeshGeometry(lengths, areas, vertex_areas, opp_sq)


def vertex_normals(mesh: Mesh) -> np.ndarray:
    """Area-weighted unit vertex normals."""
    v, f = mesh.vertices, mesh.faces
    cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    normals = np.zeros_like(v)
    for c in range(3):
        np.add.at(normals, f[:, c], cross)
    norm = np.linalg.norm(normals, axis=1, keepdims=True)
    return normals / np.where(norm > 0, norm, 1.0)


def _parse_index(token: str, n_vertices: int, path, lineno: int) -> int:
    head = token.split("/", 1)[0]
    try:
        idx = int(head)
    except ValueError:
        raise MeshParseError(path, lineno, f"malformed face index {token!r}") from None
    if idx < 0:
        idx = n_vertices + idx
    else:
        idx -= 1
    if not 0 <= idx < n_vertices:
        raise MeshParseError(path, lineno, f"face index {token!r} out of range (have {n_vertices} vertices)")
    return idx


def load_mesh(path: str | os.PathLike) -> Mesh:
    """Read an ASCII OBJ file, keeping only ``v`` and ``f`` records."""
    vertices: list[list[float]] = []
    faces: list[list[int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise MeshParseError(path, lineno, "vertex record needs 3 coordinates")
                try:
                    vertices.append([float(x) for x in parts[1:4]])
                except ValueError:
                    raise MeshParseError(path, lineno, f"malformed vertex record {line.strip()!r}") from None
            elif tag == "f":
                if len(parts) != 4:
                    raise MeshParseError(path, lineno, f"non-triangle face with {len(parts) - 1} vertices")
                faces.append([_parse_index(t, len(vertices), path, lineno) for t in parts[1:]])
    if not vertices:
        raise MeshParseError(path, 0, "no vertex records")
    try:
        return Mesh(np.array(vertices), np.array(faces, dtype=np.int64).reshape(-1, 3))
    except MeshError as exc:
        raise MeshError(f"{path}: {exc}") from exc


def save_mesh(mesh: Mesh, path: str | os.PathLike) -> None:
    lines = [f"v {x!r} {y!r} {z!r}\n" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}\n" for a, b, c in mesh.faces.tolist()]
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(lines)

"""Mesh pooling hierarchy: quadric-error decimation restricted to vertex
subsets, barycentric up-sampling and the per-level Laplacians."""

from __future__ import annotations

import hashlib
import heapq
import logging
import math
import os
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from meshgan._npz import write_npz
from meshgan.laplacian import SpectralOperator, spectral_operator
from meshgan.mesh import DEGENERATE_AREA, Mesh, save_mesh

__all__ = [
    "Hierarchy",
    "DecimationResult",
    "decimate",
    "barycentric_upsample_map",
    "closest_point_barycentric",
    "build_hierarchy",
    "save_hierarchy",
    "load_hierarchy",
    "HierarchyError",
]

logger = logging.getLogger(__name__)

BOUNDARY_WEIGHT = 1000.0
MIN_TARGET = 3
FORMAT_VERSION = 1


class HierarchyError(ValueError):
    pass


def _plane_quadric(normal: np.ndarray, point: np.ndarray, weight: float = 1.0) -> np.ndarray:
    p = np.append(normal, -normal @ point)
    return weight * np.outer(p, p)


class _Decimator:
    def __init__(self, mesh: Mesh):
        self.pos = mesh.vertices
        self.n = mesh.n
        self.faces = [list(map(int, f)) for f in mesh.faces]
        self.face_alive = [True] * len(self.faces)
        self.vert_faces: list[set[int]] = [set() for _ in range(self.n)]
        for fi, f in enumerate(self.faces):
            for v in f:
                self.vert_faces[v].add(fi)
        self.alive = np.ones(self.n, dtype=bool)
        self.n_alive = self.n
        self.version = [0] * self.n
        extent = np.ptp(self.pos, axis=0)
        self.flip_penalty = 10.0 * float(extent @ extent) + 1.0
        self.Q = np.zeros((self.n, 4, 4))
        self._init_quadrics(mesh)

    def _normal(self, f) -> np.ndarray:
        a, b, c = self.pos[f[0]], self.pos[f[1]], self.pos[f[2]]
        return np.cross(b - a, c - a)

    def _init_quadrics(self, mesh: Mesh):
        for f in self.faces:
            nrm = self._normal(f)
            norm = np.linalg.norm(nrm)
            if norm == 0:
                continue
            K = _plane_quadric(nrm / norm, self.pos[f[0]])
            for v in f:
                self.Q[v] += K
        topo = mesh.topology
        for e in np.flatnonzero(topo.boundary_mask):
            i, j = (int(x) for x in topo.edges[e])
            f = self.faces[int(topo.edge_faces[e, 0])]
            fn = self._normal(f)
            d = self.pos[j] - self.pos[i]
            perp = np.cross(d, fn)
            norm = np.linalg.norm(perp)
            if norm == 0:
                continue
            K = _plane_quadric(perp / norm, self.pos[i], BOUNDARY_WEIGHT)
            self.Q[i] += K
            self.Q[j] += K

    def neighbors(self, v: int) -> set[int]:
        out: set[int] = set()
        for fi in self.vert_faces[v]:
            out.update(self.faces[fi])
        out.discard(v)
        return out

    def edge_faces(self, a: int, b: int) -> list[int]:
        return sorted(self.vert_faces[a] & self.vert_faces[b])

    def is_boundary_vertex(self, v: int) -> bool:
        return any(len(self.edge_faces(v, w)) == 1 for w in self.neighbors(v))

    def cost(self, keep: int, remove: int) -> float:
        h = np.append(self.pos[keep], 1.0)
        return float(h @ (self.Q[keep] + self.Q[remove]) @ h)

    def candidate(self, a: int, b: int):
        lo, hi = (a, b) if a < b else (b, a)
        c_lo, c_hi = self.cost(lo, hi), self.cost(hi, lo)
        # keeping the lower index wins ties
        if c_lo <= c_hi:
            return c_lo, lo, hi, lo, hi
        return c_hi, lo, hi, hi, lo

    def push(self, heap, a: int, b: int, penalty: float = 0.0):
        cost, lo, hi, keep, remove = self.candidate(a, b)
        heapq.heappush(heap, (cost + penalty, lo, hi, keep, remove, self.version[lo], self.version[hi], penalty > 0))

    def collapse_result(self, keep: int, remove: int):
        """New face lists after moving ``remove`` onto ``keep``, or None if invalid.

        Returns ``(dropped, rewritten, flipped)``.
        """
        shared = self.edge_faces(keep, remove)
        if not shared:
            return None
        # one-ring link condition
        opposite = set()
        for fi in shared:
            opposite.update(self.faces[fi])
        opposite -= {keep, remove}
        if self.neighbors(keep) & self.neighbors(remove) != opposite:
            return None
        if len(shared) == 2 and self.is_boundary_vertex(keep) and self.is_boundary_vertex(remove):
            return None
        remaining = sum(self.face_alive) - len(shared)
        if remaining <= 0:
            return None
        rewritten = []
        flipped = False
        for fi in self.vert_faces[remove]:
            if fi in shared:
                continue
            old = self.faces[fi]
            new = [keep if v == remove else v for v in old]
            n_new = self._normal(new)
            if 0.5 * np.linalg.norm(n_new) < DEGENERATE_AREA:
                return None
            if n_new @ self._normal(old) < 0:
                flipped = True
            rewritten.append((fi, new))
        # directed edges around ``keep`` must stay unique
        directed = set()
        faces_after = [self.faces[fi] for fi in self.vert_faces[keep] if fi not in shared]
        faces_after += [f for _, f in rewritten]
        for f in faces_after:
            for k in range(3):
                e = (f[k], f[(k + 1) % 3])
                if e in directed:
                    return None
                directed.add(e)
        return shared, rewritten, flipped

    def apply(self, keep: int, remove: int, shared, rewritten):
        for fi in shared:
            self.face_alive[fi] = False
            for v in self.faces[fi]:
                self.vert_faces[v].discard(fi)
        for fi, new in rewritten:
            self.faces[fi] = new
            self.vert_faces[keep].add(fi)
        self.vert_faces[remove] = set()
        self.alive[remove] = False
        self.n_alive -= 1
        self.Q[keep] += self.Q[remove]

    def run(self, target: int) -> int:
        heap: list = []
        seen = set()
        for fi, f in enumerate(self.faces):
            for k in range(3):
                a, b = f[k], f[(k + 1) % 3]
                key = (min(a, b), max(a, b))
                if key not in seen:
                    seen.add(key)
                    self.push(heap, a, b)
        while self.n_alive > target and heap:
            cost, lo, hi, keep, remove, v_lo, v_hi, penalized = heapq.heappop(heap)
            if not (self.alive[lo] and self.alive[hi]):
                continue
            if v_lo != self.version[lo] or v_hi != self.version[hi]:
                continue
            result = self.collapse_result(keep, remove)
            if result is None:
                continue
            shared, rewritten, flipped = result
            if flipped and not penalized:
                self.push(heap, lo, hi, self.flip_penalty)
                continue
            self.apply(keep, remove, shared, rewritten)
            touched = {keep} | self.neighbors(keep)
            for v in touched:
                self.version[v] += 1
            pushed = set()
            for v in touched:
                for w in self.neighbors(v):
                    key = (min(v, w), max(v, w))
                    if key not in pushed:
                        pushed.add(key)
                        self.push(heap, v, w)
        return self.n_alive

    def result(self) -> tuple[Mesh, np.ndarray]:
        kept = np.flatnonzero(self.alive)
        remap = -np.ones(self.n, dtype=np.int64)
        remap[kept] = np.arange(len(kept))
        faces = np.array([self.faces[fi] for fi in range(len(self.faces)) if self.face_alive[fi]], dtype=np.int64)
        return Mesh(self.pos[kept], remap[faces]), kept


@dataclass(frozen=True)
class DecimationResult:
    mesh: Mesh
    down: sp.csr_matrix
    kept: np.ndarray

    def __iter__(self):
        # allows ``coarse, D = decimate(...)``
        return iter((self.mesh, self.down))


def _selection(kept: np.ndarray, n_fine: int) -> sp.csr_matrix:
    k = len(kept)
    return sp.csr_matrix((np.ones(k), (np.arange(k), kept)), shape=(k, n_fine))


def decimate(mesh: Mesh, target_vertex_count: int) -> DecimationResult:
    """Quadric-error edge collapse onto existing vertices.

    Each collapse keeps whichever endpoint has the lower accumulated quadric
    cost, so the coarse vertex set is a subset of the fine one and the
    returned down-sampling map is a pure selection matrix. Stops early, with
    a warning, if no further collapse preserves manifoldness.
    """
    target = int(target_vertex_count)
    if target < MIN_TARGET:
        raise HierarchyError(f"target vertex count must be at least {MIN_TARGET}, got {target}")
    if target >= mesh.n:
        kept = np.arange(mesh.n)
        return DecimationResult(mesh, _selection(kept, mesh.n), kept)
    dec = _Decimator(mesh)
    achieved = dec.run(target)
    if achieved > target:
        logger.warning("decimation stopped at %d vertices (target %d): no valid collapse left", achieved, target)
    coarse, kept = dec.result()
    return DecimationResult(coarse, _selection(kept, mesh.n), kept)


def closest_point_barycentric(points: np.ndarray, tri: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Barycentric coordinates of the closest point on each triangle.

    ``points`` is (P, 3), ``tri`` is (T, 3, 3). Returns ``(bary, dist2)`` of
    shapes (P, T, 3) and (P, T).
    """
    p = points[:, None, :]
    a, b, c = tri[None, :, 0], tri[None, :, 1], tri[None, :, 2]
    ab, ac = b - a, c - a
    ap, bp, cp = p - a, p - b, p - c
    d1 = np.einsum("ptk,ptk->pt", np.broadcast_to(ab, ap.shape), ap)
    d2 = np.einsum("ptk,ptk->pt", np.broadcast_to(ac, ap.shape), ap)
    d3 = np.einsum("ptk,ptk->pt", np.broadcast_to(ab, bp.shape), bp)
    d4 = np.einsum("ptk,ptk->pt", np.broadcast_to(ac, bp.shape), bp)
    d5 = np.einsum("ptk,ptk->pt", np.broadcast_to(ab, cp.shape), cp)
    d6 = np.einsum("ptk,ptk->pt", np.broadcast_to(ac, cp.shape), cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v_in, w_in = vb / denom, vc / denom
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
    bary = np.stack([1.0 - v_in - w_in, v_in, w_in], axis=-1)
    # regions in reverse precedence so earlier tests overwrite later ones
    regions = [
        ((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), np.stack([0 * t_bc, 1 - t_bc, t_bc], -1)),
        ((vb <= 0) & (d2 >= 0) & (d6 <= 0), np.stack([1 - t_ac, 0 * t_ac, t_ac], -1)),
        ((d6 >= 0) & (d5 <= d6), np.array([0.0, 0.0, 1.0])),
        ((vc <= 0) & (d1 >= 0) & (d3 <= 0), np.stack([1 - t_ab, t_ab, 0 * t_ab], -1)),
        ((d3 >= 0) & (d4 <= d3), np.array([0.0, 1.0, 0.0])),
        ((d1 <= 0) & (d2 <= 0), np.array([1.0, 0.0, 0.0])),
    ]
    for mask, value in regions:
        value = np.broadcast_to(value, bary.shape)
        bary = np.where(mask[..., None], value, bary)
    bary = np.nan_to_num(bary, nan=1.0 / 3.0)
    bary = np.clip(bary, 0.0, None)
    bary /= bary.sum(axis=-1, keepdims=True)
    closest = np.einsum("ptk,tkd->ptd", bary, tri)
    dist2 = np.sum((closest - p) ** 2, axis=-1)
    return bary, dist2


def barycentric_upsample_map(fine: Mesh, coarse: Mesh, down, chunk: int = 128) -> sp.csr_matrix:
    """Up-sampling map (n_fine x n_coarse) from closest-point barycentrics.

    Kept vertices copy their coarse counterpart; every discarded vertex is
    interpolated on the coarse triangle nearest to it.
    """
    coo = sp.coo_matrix(down)
    kept = coo.col[np.argsort(coo.row)]
    is_kept = np.zeros(fine.n, dtype=bool)
    is_kept[kept] = True
    rows = list(kept)
    cols = list(range(len(kept)))
    vals = [1.0] * len(kept)
    tri = coarse.vertices[coarse.faces]
    dropped = np.flatnonzero(~is_kept)
    for start in range(0, len(dropped), chunk):
        idx = dropped[start:start + chunk]
        bary, dist2 = closest_point_barycentric(fine.vertices[idx], tri)
        best = np.argmin(dist2, axis=1)
        w = bary[np.arange(len(idx)), best]
        corners = coarse.faces[best]
        for r, (vi, cs, ws) in enumerate(zip(idx, corners, w)):
            for cidx, wt in zip(cs, ws):
                if wt > 0.0:
                    rows.append(int(vi))
                    cols.append(int(cidx))
                    vals.append(float(wt))
    U = sp.coo_matrix((vals, (rows, cols)), shape=(fine.n, coarse.n)).tocsr()
    U.sum_duplicates()
    U.sort_indices()
    return U


@dataclass(frozen=True)
class Hierarchy:
    """Meshes from fine (level 0) to coarse with pooling maps between them.

    ``down_maps[l]`` maps level ``l`` signals to level ``l+1``;
    ``up_maps[l]`` maps level ``l+1`` back to level ``l``.
    """

    levels: tuple
    down_maps: tuple
    up_maps: tuple
    spectral_ops: tuple

    @property
    def n_levels(self) -> int:
        return len(self.levels) - 1

    @property
    def sizes(self) -> list[int]:
        return [m.n for m in self.levels]

    @property
    def template(self) -> Mesh:
        return self.levels[0]

    @cached_property
    def down_t(self) -> tuple:
        return tuple(sp.csr_matrix(D.T) for D in self.down_maps)

    @cached_property
    def up_t(self) -> tuple:
        return tuple(sp.csr_matrix(U.T) for U in self.up_maps)

    @property
    def checksum(self) -> str:
        h = hashlib.sha256()
        for mesh in self.levels:
            h.update(np.ascontiguousarray(mesh.vertices).tobytes())
            h.update(np.ascontiguousarray(mesh.faces).tobytes())
        for M in self.down_maps + self.up_maps:
            coo = sp.coo_matrix(M)
            order = np.lexsort((coo.col, coo.row))
            for arr in (coo.row[order], coo.col[order], coo.data[order]):
                h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        for op in self.spectral_ops:
            h.update(np.float64(op.lambda_max).tobytes())
        return h.hexdigest()


def build_hierarchy(template: Mesh, levels: int = 4, factor: float = 4.0) -> Hierarchy:
    """Chain ``levels`` decimations, each to ``ceil(n / factor)`` vertices."""
    if levels < 0:
        raise HierarchyError("levels must be non-negative")
    meshes = [template]
    downs, ups = [], []
    for lvl in range(levels):
        fine = meshes[-1]
        target = math.ceil(fine.n / factor)
        if target < MIN_TARGET:
            raise HierarchyError(
                f"level {lvl + 1} target {target} below {MIN_TARGET}; template too small for {levels} levels"
            )
        res = decimate(fine, target)
        U = barycentric_upsample_map(fine, res.mesh, res.down)
        meshes.append(res.mesh)
        downs.append(res.down)
        ups.append(U)
        logger.info("level %d: %d -> %d vertices", lvl + 1, fine.n, res.mesh.n)
    ops = tuple(spectral_operator(m) for m in meshes)
    return Hierarchy(tuple(meshes), tuple(downs), tuple(ups), ops)


def _pack(prefix: str, M, out: dict):
    coo = sp.coo_matrix(M)
    out[f"{prefix}_rows"] = coo.row.astype(np.int64)
    out[f"{prefix}_cols"] = coo.col.astype(np.int64)
    out[f"{prefix}_data"] = coo.data.astype(np.float64)
    out[f"{prefix}_shape"] = np.array(coo.shape, dtype=np.int64)


def _unpack(prefix: str, data) -> sp.csr_matrix:
    M = sp.coo_matrix(
        (data[f"{prefix}_data"], (data[f"{prefix}_rows"], data[f"{prefix}_cols"])),
        shape=tuple(data[f"{prefix}_shape"]),
    ).tocsr()
    M.sort_indices()
    return M


def save_hierarchy(hierarchy: Hierarchy, path: str | os.PathLike) -> None:
    """Write the hierarchy to a single ``.npz`` file.

    Layout: ``format_version``, ``n_levels``, ``sizes``, ``lambda_max``,
    ``level{l}_vertices`` / ``level{l}_faces`` per level, COO triplets
    ``down{l}_{rows,cols,data,shape}`` and ``up{l}_...`` per map, and
    ``checksum`` (sha256 hex string).
    """
    out: dict = {
        "format_version": np.array(FORMAT_VERSION),
        "n_levels": np.array(hierarchy.n_levels),
        "sizes": np.array(hierarchy.sizes, dtype=np.int64),
        "lambda_max": np.array([op.lambda_max for op in hierarchy.spectral_ops]),
        "checksum": np.array(hierarchy.checksum),
    }
    for lvl, mesh in enumerate(hierarchy.levels):
        out[f"level{lvl}_vertices"] = mesh.vertices
        out[f"level{lvl}_faces"] = mesh.faces
    for lvl, (D, U) in enumerate(zip(hierarchy.down_maps, hierarchy.up_maps)):
        _pack(f"down{lvl}", D, out)
        _pack(f"up{lvl}", U, out)
    write_npz(path, out)


def load_hierarchy(path: str | os.PathLike) -> Hierarchy:
    from meshgan.laplacian import cotangent_weights
    from meshgan.mesh import compute_geometry

    with np.load(path, allow_pickle=False) as data:
        if int(data["format_version"]) != FORMAT_VERSION:
            raise HierarchyError(f"unsupported hierarchy format {int(data['format_version'])}")
        n_levels = int(data["n_levels"])
        meshes = [Mesh(data[f"level{l}_vertices"], data[f"level{l}_faces"]) for l in range(n_levels + 1)]
        downs = tuple(_unpack(f"down{l}", data) for l in range(n_levels))
        ups = tuple(_unpack(f"up{l}", data) for l in range(n_levels))
        lambdas = data["lambda_max"]
        stored = str(data["checksum"])
    ops = []
    for mesh, lam in zip(meshes, lambdas):
        geom = compute_geometry(mesh)
        ops.append(SpectralOperator(cotangent_weights(mesh, geom), geom.vertex_areas.copy(), float(lam)))
    h = Hierarchy(tuple(meshes), downs, ups, tuple(ops))
    if h.checksum != stored:
        raise HierarchyError(f"{path}: checksum mismatch (file corrupt or written by another version)")
    return h


def write_level_objs(hierarchy: Hierarchy, directory: str | os.PathLike) -> list[str]:
    os.makedirs(directory, exist_ok=True)
    paths = []
    for lvl, mesh in enumerate(hierarchy.levels):
        p = os.path.join(directory, f"level_{lvl}.obj")
        save_mesh(mesh, p)
        paths.append(p)
    return paths


def check_manifold(mesh: Mesh) -> None:
    """Raise MeshError unless every edge has one or two faces and orientation is consistent."""
    # Topology construction performs both checks
    Mesh(mesh.vertices, mesh.faces)

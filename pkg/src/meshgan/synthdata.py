"""Synthetic head-like mesh distribution with known generative factors.

Identities are low-frequency Laplacian eigenmodes pushed along vertex
normals of an ellipsoid template; expressions are sums of localized
Gaussian bumps. Both are exactly reproducible from a seed.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse.linalg

from meshgan.laplacian import DENSE_LIMIT, cotangent_weights, eigendecomposition
from meshgan.mesh import DEGENERATE_AREA, Mesh, MeshError, compute_geometry, load_mesh, save_mesh, vertex_normals

__all__ = [
    "SynthConfig",
    "Dataset",
    "icosphere",
    "make_template",
    "identity_basis",
    "sample_identity",
    "sample_expression",
    "generate_dataset",
    "write_dataset",
    "read_dataset",
    "HALF_AXES",
]

HALF_AXES = (80.0, 110.0, 95.0)


@dataclass
class SynthConfig:
    template_level: int = 3
    n_identities: int = 300
    identity_factors: int = 6
    identity_amplitude: float = 4.0
    n_expressions: int = 0
    expression_bumps: int = 3
    expression_width: float = 18.0
    expression_amplitude: float = 5.0
    expression_smoothing_iterations: int = 0
    train_fraction: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.template_level <= 5:
            raise ValueError(f"template_level must lie in [1, 5], got {self.template_level}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if self.identity_factors < 1:
            raise ValueError("identity_factors must be positive")


def icosphere(level: int) -> Mesh:
    """Unit icosphere subdivided ``level`` times (``10 * 4**level + 2`` vertices)."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = [
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ]
    faces = [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ]
    v = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in verts]
    for _ in range(level):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i: int, j: int) -> int:
            key = (i, j) if i < j else (j, i)
            if key not in cache:
                p = v[i] + v[j]
                v.append(p / np.linalg.norm(p))
                cache[key] = len(v) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new_faces
    return Mesh(np.array(v), np.array(faces))


def make_template(level: int) -> Mesh:
    """Icosphere stretched to head-like ellipsoid proportions (mm)."""
    if not 1 <= level <= 5:
        raise ValueError(f"level must lie in [1, 5], got {level}")
    sphere = icosphere(level)
    return sphere.with_vertices(sphere.vertices * np.array(HALF_AXES))


def identity_basis(template: Mesh, count: int) -> np.ndarray:
    """``count`` lowest non-constant Laplacian eigenvectors, each scaled to unit RMS.

    Returns an (n, count) array.
    """
    geom = compute_geometry(template)
    W = cotangent_weights(template, geom)
    k = count + 1
    if template.n <= DENSE_LIMIT:
        basis = eigendecomposition(W, geom.vertex_areas, k)
        phi = basis.Phi
    else:
        M = scipy.sparse.diags(geom.vertex_areas)
        vals, phi = scipy.sparse.linalg.eigsh(-W, k=k, M=M, sigma=-1e-6, which="LM")
        phi = phi[:, np.argsort(vals)]
    modes = phi[:, 1:k]
    # fix sign so the largest-magnitude entry is positive
    idx = np.argmax(np.abs(modes), axis=0)
    modes = modes * np.sign(modes[idx, np.arange(modes.shape[1])])
    return modes / np.sqrt(np.mean(modes**2, axis=0))


def _valid(template: Mesh, vertices: np.ndarray) -> bool:
    try:
        geom = compute_geometry(template.with_vertices(vertices))
    except MeshError:
        return False
    return bool(np.all(geom.face_areas > DEGENERATE_AREA))


def sample_identity(
    template: Mesh,
    basis: np.ndarray,
    rng: np.random.Generator,
    amplitude: float = 4.0,
    normals: np.ndarray | None = None,
    max_attempts: int = 10,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw one identity; returns ``(vertices, coefficients)``.

    Coefficients are i.i.d. ``N(0, amplitude^2)`` in mm and multiply the
    unit-RMS modes in ``basis`` along the template normals.
    """
    if normals is None:
        normals = vertex_normals(template)
    for _ in range(max_attempts):
        coeffs = rng.normal(0.0, amplitude, size=basis.shape[1])
        vertices = template.vertices + (basis @ coeffs)[:, None] * normals
        if _valid(template, vertices):
            return vertices, coeffs
    raise MeshError(f"no valid identity sample in {max_attempts} attempts")


def expression_deformation(
    template: Mesh,
    seeds: np.ndarray,
    amplitudes: np.ndarray,
    width: float,
    normals: np.ndarray | None = None,
) -> np.ndarray:
    """Sum of Gaussian bumps centred at vertex indices ``seeds`` (n, 3 offsets)."""
    if normals is None:
        normals = vertex_normals(template)
    v = template.vertices
    height = np.zeros(len(v))
    for s, a in zip(np.asarray(seeds, dtype=int), np.asarray(amplitudes, dtype=float)):
        d2 = np.sum((v - v[s]) ** 2, axis=1)
        height += a * np.exp(-d2 / (2.0 * width**2))
    return height[:, None] * normals


def sample_expression(
    template: Mesh,
    rng: np.random.Generator,
    bumps: int = 3,
    width: float = 18.0,
    amplitude: float = 5.0,
    normals: np.ndarray | None = None,
    max_attempts: int = 10,
) -> tuple[np.ndarray, dict]:
    """Draw an expression applied to the template; returns ``(vertices, factors)``."""
    for _ in range(max_attempts):
        seeds = rng.choice(template.n, size=bumps, replace=False) if bumps else np.zeros(0, dtype=int)
        amps = amplitude * rng.choice([-1.0, 1.0], size=bumps) * rng.uniform(0.5, 1.0, size=bumps)
        vertices = template.vertices + expression_deformation(template, seeds, amps, width, normals)
        if _valid(template, vertices):
            return vertices, {"seeds": seeds.tolist(), "amplitudes": amps.tolist()}
    raise MeshError(f"no valid expression sample in {max_attempts} attempts")


@dataclass
class Dataset:
    """Meshes on one template, as (N, n, 3) coordinate stacks with a split."""

    template: Mesh
    identities: np.ndarray
    expressions: np.ndarray
    identity_split: np.ndarray  # True = train
    expression_split: np.ndarray
    factors: dict = field(default_factory=dict)
    config: SynthConfig | None = None

    def split(self, kind: str = "identity") -> tuple[np.ndarray, np.ndarray]:
        """``(train, test)`` coordinate stacks for ``kind`` in {identity, expression}."""
        if kind == "identity":
            data, mask = self.identities, self.identity_split
        elif kind == "expression":
            data, mask = self.expressions, self.expression_split
        else:
            raise ValueError(f"unknown dataset kind {kind!r}")
        return data[mask], data[~mask]


def _split_mask(count: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    n_train = int(round(count * fraction))
    mask = np.zeros(count, dtype=bool)
    mask[rng.permutation(count)[:n_train]] = True
    return mask


def generate_dataset(config: SynthConfig) -> Dataset:
    """Draw identities and expressions and split them by a seeded shuffle."""
    # separate streams so adding expressions never perturbs identities
    ss = np.random.SeedSequence(config.seed)
    id_seq, expr_seq, split_seq = ss.spawn(3)
    template = make_template(config.template_level)
    normals = vertex_normals(template)
    basis = identity_basis(template, config.identity_factors)

    rng = np.random.default_rng(id_seq)
    ids, coeffs = [], []
    for _ in range(config.n_identities):
        v, c = sample_identity(template, basis, rng, config.identity_amplitude, normals)
        ids.append(v)
        coeffs.append(c.tolist())

    rng = np.random.default_rng(expr_seq)
    exprs, expr_factors = [], []
    smoothing = None
    if config.expression_smoothing_iterations > 0:
        from meshgan.evaluation import taubin_smooth
        from meshgan.laplacian import uniform_laplacian

        smoothing = uniform_laplacian(template)
    for _ in range(config.n_expressions):
        v, fac = sample_expression(
            template, rng, config.expression_bumps, config.expression_width, config.expression_amplitude, normals
        )
        if smoothing is not None:
            v = taubin_smooth(v, smoothing, config.expression_smoothing_iterations)
        exprs.append(v)
        expr_factors.append(fac)

    rng = np.random.default_rng(split_seq)
    id_split = _split_mask(config.n_identities, config.train_fraction, rng)
    ex_split = _split_mask(config.n_expressions, config.train_fraction, rng)
    shape = (0, template.n, 3)
    return Dataset(
        template=template,
        identities=np.array(ids) if ids else np.zeros(shape),
        expressions=np.array(exprs) if exprs else np.zeros(shape),
        identity_split=id_split,
        expression_split=ex_split,
        factors={"identity": coeffs, "expression": expr_factors},
        config=config,
    )


def write_dataset(dataset: Dataset, directory: str | os.PathLike) -> None:
    """Numbered OBJs plus ``manifest.json`` (config, factors, split)."""
    os.makedirs(directory, exist_ok=True)
    save_mesh(dataset.template, os.path.join(directory, "template.obj"))
    for kind, data in (("identity", dataset.identities), ("expression", dataset.expressions)):
        for i, v in enumerate(data):
            save_mesh(dataset.template.with_vertices(v), os.path.join(directory, f"{kind}_{i:05d}.obj"))
    manifest = {
        "config": asdict(dataset.config) if dataset.config is not None else None,
        "template": "template.obj",
        "identity": {
            "count": len(dataset.identities),
            "train": np.flatnonzero(dataset.identity_split).tolist(),
            "test": np.flatnonzero(~dataset.identity_split).tolist(),
            "factors": dataset.factors.get("identity", []),
        },
        "expression": {
            "count": len(dataset.expressions),
            "train": np.flatnonzero(dataset.expression_split).tolist(),
            "test": np.flatnonzero(~dataset.expression_split).tolist(),
            "factors": dataset.factors.get("expression", []),
        },
    }
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_dataset(directory: str | os.PathLike) -> Dataset:
    with open(os.path.join(directory, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    template = load_mesh(os.path.join(directory, manifest["template"]))
    stacks, splits = {}, {}
    for kind in ("identity", "expression"):
        count = manifest[kind]["count"]
        verts = []
        for i in range(count):
            mesh = load_mesh(os.path.join(directory, f"{kind}_{i:05d}.obj"))
            if not mesh.same_topology(template):
                raise MeshError(f"{kind}_{i:05d}.obj does not share the template topology")
            verts.append(mesh.vertices)
        stacks[kind] = np.array(verts) if verts else np.zeros((0, template.n, 3))
        mask = np.zeros(count, dtype=bool)
        mask[manifest[kind]["train"]] = True
        splits[kind] = mask
    config = SynthConfig(**manifest["config"]) if manifest.get("config") else None
    return Dataset(
        template=template,
        identities=stacks["identity"],
        expressions=stacks["expression"],
        identity_split=splits["identity"],
        expression_split=splits["expression"],
        factors={k: manifest[k]["factors"] for k in ("identity", "expression")},
        config=config,
    )

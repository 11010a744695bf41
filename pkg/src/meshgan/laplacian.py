"""Intrinsic cotangent Laplacian, lumped mass matrix and spectral tools.

The operator used throughout is ``Delta = A^{-1} (-W)`` where ``W`` carries
positive off-diagonal cotangent weights and a diagonal equal to minus the
row sum. With this sign the generalized spectrum of ``(-W, A)`` is
non-negative and the smallest eigenvalue of a connected mesh is zero.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from meshgan.mesh import Mesh, MeshGeometry, compute_geometry

__all__ = [
    "ConvergenceError",
    "SpectralOperator",
    "EigenBasis",
    "cotangent_weights",
    "mass_matrix",
    "power_iteration",
    "max_eigenvalue",
    "apply_rescaled_laplacian",
    "eigendecomposition",
    "spectral_filter_reference",
    "spectral_operator",
    "uniform_laplacian",
    "dump_coo",
    "DENSE_LIMIT",
]

DENSE_LIMIT = 3000
SAFETY_FACTOR = 1.01


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, last: float):
        self.last = last
        super().__init__(f"{message} (last iterate {last!r})")


def _mass_vector(A) -> np.ndarray:
    if sp.issparse(A):
        return np.asarray(A.diagonal(), dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    return np.diag(A).copy() if A.ndim == 2 else A


def cotangent_weights(mesh: Mesh, geom: MeshGeometry | None = None) -> sp.csr_matrix:
    """Symmetric edge-weight matrix built from edge lengths only.

    Each face contributes ``(-l_ij^2 + l_jk^2 + l_ki^2) / (8 A_ijk)`` to the
    edge ``ij`` opposite its corner ``k``. Obtuse corners give negative
    weights and are kept.
    """
    if geom is None:
        geom = compute_geometry(mesh)
    f = mesh.faces
    opp = geom.corner_opposite_sq  # opp[:, c] = squared length opposite corner c
    total = opp.sum(axis=1, keepdims=True)
    # -l_opp^2 + (sum of the two adjacent) = total - 2 l_opp^2
    terms = (total - 2.0 * opp) / (8.0 * geom.face_areas[:, None])
    rows = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
    cols = np.concatenate([f[:, 2], f[:, 0], f[:, 1]])
    vals = np.concatenate([terms[:, 0], terms[:, 1], terms[:, 2]])
    n = mesh.n
    off = sp.coo_matrix(
        (np.concatenate([vals, vals]), (np.concatenate([rows, cols]), np.concatenate([cols, rows]))),
        shape=(n, n),
    ).tocsr()
    off.sum_duplicates()
    diag = -np.asarray(off.sum(axis=1)).ravel()
    W = (off + sp.diags(diag)).tocsr()
    W.sort_indices()
    return W


def mass_matrix(geom: MeshGeometry) -> sp.dia_matrix:
    return sp.diags(geom.vertex_areas)


def power_iteration(W, A, tol: float = 1e-6, max_iter: int = 10_000, seed: int = 0):
    """Largest generalized eigenvalue of ``(-W, A)`` by power iteration.

    Iterates on the symmetric similar matrix ``A^{-1/2} (-W) A^{-1/2}`` so the
    Rayleigh quotients are lower bounds of the true value.

    Returns
    -------
    estimate : float
        Final Rayleigh quotient (no safety factor).
    history : list of float
        Every Rayleigh quotient observed.
    """
    a = _mass_vector(A)
    s = 1.0 / np.sqrt(a)
    S = sp.diags(s) @ (-W) @ sp.diags(s)
    S = sp.csr_matrix(S)
    rng = np.random.default_rng(seed)
    y = rng.standard_normal(len(a))
    y /= np.linalg.norm(y)
    history: list[float] = []
    prev = None
    for _ in range(max_iter):
        sy = S @ y
        rq = float(y @ sy)
        history.append(rq)
        norm = np.linalg.norm(sy)
        if norm == 0.0:
            return 0.0, history
        y = sy / norm
        if prev is not None and abs(rq - prev) <= tol * abs(rq):
            return rq, history
        prev = rq
    raise ConvergenceError(f"power iteration did not converge in {max_iter} iterations", history[-1])


def max_eigenvalue(W, A, tol: float = 1e-6, max_iter: int = 10_000) -> float:
    """Upper-biased estimate of the largest eigenvalue of ``A^{-1}(-W)``."""
    _, history = power_iteration(W, A, tol=tol, max_iter=max_iter)
    return SAFETY_FACTOR * max(history)


def apply_rescaled_laplacian(W, A, lambda_max: float, X: np.ndarray) -> np.ndarray:
    """``(2 / lambda_max) A^{-1}(-W) X - X`` with sparse products only."""
    X = np.asarray(X, dtype=np.float64)
    a = _mass_vector(A)
    if X.shape[0] != W.shape[0] or len(a) != W.shape[0]:
        raise ValueError(f"shape mismatch: W {W.shape}, A {len(a)}, X {X.shape}")
    LX = -(W @ X)
    inv = 1.0 / a
    LX = LX * (inv[:, None] if X.ndim == 2 else inv)
    return (2.0 / lambda_max) * LX - X


@dataclass(frozen=True)
class SpectralOperator:
    """Per-mesh Laplacian pieces: weights ``W``, lumped areas, ``lambda_max``."""

    W: sp.csr_matrix
    mass: np.ndarray
    lambda_max: float

    @property
    def n(self) -> int:
        return self.W.shape[0]

    @property
    def A(self) -> sp.dia_matrix:
        return sp.diags(self.mass)

    @cached_property
    def laplacian(self) -> sp.csr_matrix:
        return sp.csr_matrix(sp.diags(1.0 / self.mass) @ (-self.W))

    @cached_property
    def rescaled(self) -> sp.csr_matrix:
        """Sparse ``2/lambda_max * Delta - I``."""
        L = (2.0 / self.lambda_max) * self.laplacian - sp.identity(self.n, format="csr")
        L = sp.csr_matrix(L)
        L.sort_indices()
        return L

    @cached_property
    def rescaled_t(self) -> sp.csr_matrix:
        return sp.csr_matrix(self.rescaled.T)

    def apply_rescaled(self, X: np.ndarray) -> np.ndarray:
        return apply_rescaled_laplacian(self.W, self.mass, self.lambda_max, X)


def spectral_operator(mesh: Mesh) -> SpectralOperator:
    geom = compute_geometry(mesh)
    W = cotangent_weights(mesh, geom)
    return SpectralOperator(W, geom.vertex_areas.copy(), max_eigenvalue(W, geom.vertex_areas))


@dataclass(frozen=True)
class EigenBasis:
    """A-orthonormal generalized eigenvectors (columns) and ascending eigenvalues."""

    Phi: np.ndarray
    Lambda: np.ndarray
    mass: np.ndarray

    @property
    def k(self) -> int:
        return len(self.Lambda)

    def transform(self, f: np.ndarray) -> np.ndarray:
        """Fourier coefficients ``Phi^T A f``."""
        f = np.asarray(f, dtype=np.float64)
        weighted = f * (self.mass[:, None] if f.ndim == 2 else self.mass)
        return self.Phi.T @ weighted


def eigendecomposition(W, A, k: int | None = None, dense_limit: int = DENSE_LIMIT) -> EigenBasis:
    """Smallest ``k`` generalized eigenpairs of ``(-W, A)`` (dense reference path)."""
    n = W.shape[0]
    if n > dense_limit:
        raise ValueError(
            f"mesh has {n} vertices, above the dense limit {dense_limit}; "
            "use scipy.sparse.linalg.eigsh with shift-invert for large meshes"
        )
    k = n if k is None else int(k)
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    a = _mass_vector(A)
    Wd = W.toarray() if sp.issparse(W) else np.asarray(W)
    # diagonal mass: solve the symmetric problem D^-1/2 (-W) D^-1/2 and map back
    s = 1.0 / np.sqrt(a)
    evals, evecs = scipy.linalg.eigh(-Wd * s[:, None] * s[None, :], driver="evd")
    return EigenBasis(evecs[:, :k] * s[:, None], evals[:k], a.copy())


def spectral_filter_reference(f: np.ndarray, multipliers: np.ndarray, basis: EigenBasis) -> np.ndarray:
    """Explicit spectral filter ``Phi diag(g) Phi^T A f`` on a full basis."""
    n = basis.Phi.shape[0]
    if basis.k != n:
        raise ValueError(f"spectral filtering needs the full basis ({n} vectors), got {basis.k}")
    g = np.asarray(multipliers, dtype=np.float64)
    coeffs = basis.transform(f)
    coeffs = coeffs * (g[:, None] if coeffs.ndim == 2 else g)
    return basis.Phi @ coeffs


def uniform_laplacian(mesh: Mesh) -> sp.csr_matrix:
    """Umbrella operator: ``(L x)_i = mean of neighbours - x_i``."""
    e = mesh.topology.edges
    n = mesh.n
    adj = sp.coo_matrix(
        (np.ones(2 * len(e)), (np.concatenate([e[:, 0], e[:, 1]]), np.concatenate([e[:, 1], e[:, 0]]))),
        shape=(n, n),
    ).tocsr()
    deg = np.asarray(adj.sum(axis=1)).ravel()
    return sp.csr_matrix(sp.diags(1.0 / deg) @ adj - sp.identity(n))


def dump_coo(matrix, path: str | os.PathLike) -> None:
    """Write a sparse matrix as ``row col value`` text lines."""
    coo = sp.coo_matrix(matrix)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
        for r, c, v in zip(coo.row.tolist(), coo.col.tolist(), coo.data.tolist()):
            fh.write(f"{r} {c} {v!r}\n")

"""Intrinsic evaluation metrics and latent-space tools.

Distances are reported in the units of the vertex coordinates (millimetres
for the synthetic data). Metrics take raw vertex arrays of shape (N, n, 3);
generators are wrapped in :class:`Generator`, which handles signal
normalization and latent sampling for both the adversarial model and the
auto-encoder baseline.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from meshgan.diffcore import Tape, Tensor, backward, l1_loss
from meshgan.hierarchy import Hierarchy
from meshgan.laplacian import EigenBasis, uniform_laplacian
from meshgan.mesh import Mesh
from meshgan.models import Checkpoint, ModelParams, SignalCoder, decoder_forward, encoder_forward

__all__ = [
    "MetricReport",
    "GaussianFit",
    "Generator",
    "InversionResult",
    "invert_latent",
    "generalisation",
    "specificity",
    "mean_vertex_distance",
    "mesh_features",
    "frechet_distance",
    "fid_score",
    "mix_latent",
    "compose_identity_expression",
    "taubin_smooth",
    "path_lipschitz",
]

COV_LOADING = 1e-6


@dataclass
class MetricReport:
    mean: float
    std: float
    per_sample: list
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_samples(cls, values, **metadata) -> MetricReport:
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.size == 0:
            raise ValueError("a metric report needs at least one sample")
        return cls(float(values.mean()), float(values.std()), values.tolist(), dict(metadata))

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "per_sample": list(self.per_sample), "metadata": self.metadata}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass(frozen=True)
class GaussianFit:
    mu: np.ndarray
    sigma: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.mu)

    @classmethod
    def fit(cls, samples: np.ndarray) -> GaussianFit:
        """Sample mean and covariance; diagonal loading when there are too few samples."""
        X = np.asarray(samples, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] == 0:
            raise ValueError(f"need a non-empty (N, d) sample matrix, got shape {X.shape}")
        N, d = X.shape
        mu = X.mean(axis=0)
        if N > 1:
            sigma = np.cov(X, rowvar=False).reshape(d, d)
        else:
            sigma = np.zeros((d, d))
        if N < d + 1:
            sigma = sigma + COV_LOADING * np.eye(d)
        return cls(mu, 0.5 * (sigma + sigma.T))

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        w, V = np.linalg.eigh(self.sigma)
        root = V * np.sqrt(np.clip(w, 0.0, None))
        return self.mu + rng.standard_normal((count, self.dim)) @ root.T


@dataclass
class Generator:
    """A trained decoder plus what is needed to turn its output into vertices.

    ``mode`` is ``"began"`` (latents on the box ``[-1, 1]^h``) or ``"ae"``
    (unconstrained latents). ``encoder`` holds encoder weights when available
    (auto-encoder checkpoints), enabling :meth:`encode`.
    """

    params: ModelParams
    hierarchy: Hierarchy
    coder: SignalCoder
    mode: str = "began"
    encoder: ModelParams | None = None
    latent_fit: GaussianFit | None = None

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint, hierarchy: Hierarchy) -> Generator:
        mode = checkpoint.mode
        encoder = checkpoint.models["AE"] if "AE" in checkpoint.models else None
        return cls(checkpoint.generator, hierarchy, checkpoint.coder, mode, encoder)

    @property
    def latent_dim(self) -> int:
        return self.params.config.latent_dim

    @property
    def bounded(self) -> bool:
        return self.mode == "began"

    def decode(self, z: np.ndarray) -> np.ndarray:
        """Latents (B, h) -> vertices (B, n, 3); chunked to bound memory."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        out = [decoder_forward(z[i:i + 256], self.params.tensors, self.hierarchy, self.params.config).values
               for i in range(0, len(z), 256)]
        return self.coder.decode(np.concatenate(out, axis=0))

    def encode(self, vertices: np.ndarray) -> np.ndarray:
        if self.encoder is None:
            raise ValueError("this generator has no encoder")
        X = self.coder.encode(np.asarray(vertices, dtype=np.float64))
        if X.ndim == 2:
            X = X[None]
        out = [encoder_forward(X[i:i + 256], self.encoder.tensors, self.hierarchy, self.encoder.config).values
               for i in range(0, len(X), 256)]
        return np.concatenate(out, axis=0)

    def fit_latent_distribution(self, train: np.ndarray) -> GaussianFit:
        """Gaussian on the training-set embeddings, used to sample the auto-encoder."""
        self.latent_fit = GaussianFit.fit(self.encode(train))
        return self.latent_fit

    def sample_latents(self, rng: np.random.Generator, count: int, standard: bool = False) -> np.ndarray:
        """Box-uniform latents for the adversarial model.

        For the auto-encoder, draws from the fitted embedding Gaussian, or
        from a standard normal when ``standard`` is set or no fit exists.
        """
        if self.bounded:
            return rng.uniform(-1.0, 1.0, size=(count, self.latent_dim))
        if standard or self.latent_fit is None:
            return rng.standard_normal((count, self.latent_dim))
        return self.latent_fit.sample(rng, count)


def mean_vertex_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Mean per-vertex Euclidean distance over the last two axes."""
    return np.linalg.norm(np.asarray(a) - np.asarray(b), axis=-1).mean(axis=-1)


@dataclass
class InversionResult:
    z: np.ndarray
    residual: np.ndarray
    restart: np.ndarray


def _restart_inits(seed: int, restarts: int, dim: int) -> np.ndarray:
    # restart r always starts from the same point whichever sample is inverted
    return np.stack([np.random.default_rng([seed, r]).uniform(-1.0, 1.0, size=dim) for r in range(restarts)])


def invert_latent(x: np.ndarray, generator: Generator, restarts: int = 5, iterations: int = 500,
                  lr: float = 0.05, seed: int = 0, project: bool | None = None,
                  chunk: int = 64) -> InversionResult:
    """``argmin_z |x - G(z)|_1`` by Adam from ``restarts`` uniform starts.

    The step size is cosine-annealed from ``lr`` to zero over the iterations.
    With ``project`` (default: the generator is box-bounded) the iterate is
    clipped to ``[-1, 1]^h`` after every step. For each start the best
    iterate by L1 loss is kept; among starts, the one with the smallest mean
    per-vertex Euclidean residual wins. ``x`` has shape (n, 3) or (B, n, 3).
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    X = x[None] if single else x
    if restarts < 1 or iterations < 0:
        raise ValueError("restarts must be >= 1 and iterations >= 0")
    project = generator.bounded if project is None else project
    h = generator.latent_dim
    inits = _restart_inits(seed, restarts, h)
    targets = generator.coder.encode(X)
    B = len(X)
    z_best = np.empty((B, h))
    res_best = np.full(B, np.inf)
    which = np.zeros(B, dtype=int)
    # all (sample, restart) pairs are optimized together; rows are independent
    pairs = [(b, r) for b in range(B) for r in range(restarts)]
    for start in range(0, len(pairs), chunk):
        part = pairs[start:start + chunk]
        bi = np.array([p[0] for p in part])
        ri = np.array([p[1] for p in part])
        z, _ = _adam_invert(targets[bi], inits[ri].copy(), generator, iterations, lr, project)
        res = mean_vertex_distance(generator.decode(z), X[bi])
        for j, (b, r) in enumerate(part):
            if res[j] < res_best[b]:
                res_best[b], z_best[b], which[b] = res[j], z[j], r
    if single:
        return InversionResult(z_best[0], res_best[0], which[0])
    return InversionResult(z_best, res_best, which)


def _adam_invert(targets, z, generator: Generator, iterations, lr, project, b1=0.9, b2=0.999, eps=1e-8):
    P, cfg, hier = generator.params.tensors, generator.params.config, generator.hierarchy
    m = np.zeros_like(z)
    v = np.zeros_like(z)
    best_z, best_loss = z.copy(), np.full(len(z), np.inf)
    for t in range(iterations + 1):
        zt = Tensor(z, requires_grad=True)
        with Tape():
            out = decoder_forward(zt, P, hier, cfg)
            loss = l1_loss(out, targets)
        sample_loss = np.abs(out.values - targets).reshape(len(z), -1).mean(axis=1)
        better = sample_loss < best_loss
        best_loss[better] = sample_loss[better]
        best_z[better] = z[better]
        if t == iterations:
            break
        backward(loss)
        # undo the batch averaging so each row sees its own loss gradient
        g = zt.grad * len(z)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        step = lr * 0.5 * (1.0 + math.cos(math.pi * t / max(iterations, 1)))
        z = z - step * (m / (1 - b1 ** (t + 1))) / (np.sqrt(v / (1 - b2 ** (t + 1))) + eps)
        if project:
            z = np.clip(z, -1.0, 1.0)
    return best_z, best_loss


def generalisation(test: np.ndarray, generator: Generator, restarts: int = 5, iterations: int = 500,
                   lr: float = 0.05, seed: int = 0, **metadata) -> MetricReport:
    """Mean per-vertex distance between each test mesh and its best reconstruction."""
    test = np.asarray(test, dtype=np.float64)
    if test.ndim != 3 or len(test) == 0:
        raise ValueError("generalisation needs a non-empty (N, n, 3) test set")
    inv = invert_latent(test, generator, restarts=restarts, iterations=iterations, lr=lr, seed=seed)
    return MetricReport.from_samples(inv.residual, metric="generalisation", mode=generator.mode,
                                     n_test=len(test), restarts=restarts, iterations=iterations, seed=seed,
                                     **metadata)


def specificity(generator: Generator, test: np.ndarray, n_samples: int = 1000, seed: int = 0,
                **metadata) -> MetricReport:
    """Distance from each random sample to its nearest test mesh.

    The auto-encoder is sampled from its fitted embedding Gaussian; call
    :meth:`Generator.fit_latent_distribution` first.
    """
    test = np.asarray(test, dtype=np.float64)
    if test.ndim != 3 or len(test) == 0:
        raise ValueError("specificity needs a non-empty (N, n, 3) test set")
    if not generator.bounded and generator.latent_fit is None:
        raise ValueError("fit the auto-encoder latent distribution on training data before sampling")
    rng = np.random.default_rng(seed)
    z = generator.sample_latents(rng, n_samples)
    nearest = np.empty(n_samples)
    for start in range(0, n_samples, 128):
        gen = generator.decode(z[start:start + 128])
        d = mean_vertex_distance(gen[:, None], test[None])
        nearest[start:start + len(gen)] = d.min(axis=1)
    return MetricReport.from_samples(nearest, metric="specificity", mode=generator.mode, n_test=len(test),
                                     n_samples=n_samples, seed=seed, **metadata)


def mesh_features(x: np.ndarray, basis: EigenBasis, template: np.ndarray | Mesh, m: int = 16) -> np.ndarray:
    """Low-frequency spectral descriptor of the displacement from ``template``.

    Returns the first ``m`` coefficients of ``Phi^T A (x - template)`` per
    coordinate channel, channel-major, shape (3m,) or (N, 3m). Coefficients
    are divided by the square root of the total area so they carry mm units
    whatever the template size.
    """
    if m > basis.k:
        raise ValueError(f"m={m} exceeds the basis size {basis.k}")
    t = template.vertices if isinstance(template, Mesh) else np.asarray(template, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    disp = x - t
    Phi = basis.Phi[:, :m] * (basis.mass[:, None] / np.sqrt(basis.mass.sum()))
    coeffs = np.einsum("nk,...nc->...ck", Phi, disp)
    return coeffs.reshape(coeffs.shape[:-2] + (3 * m,))


def _psd_factor(S: np.ndarray) -> np.ndarray:
    """``F`` with ``F F^T = S`` after clamping negative eigenvalues to zero."""
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    return V * np.sqrt(np.clip(w, 0.0, None))


def frechet_distance(a: GaussianFit, b: GaussianFit) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})``.

    With ``S = F F^T`` from clamped eigendecompositions, ``Tr sqrt(sqrt(S_a)
    S_b sqrt(S_a))`` equals the sum of singular values of ``F_a^T F_b``.
    Taking singular values directly avoids square-rooting the rounding noise
    of near-zero eigenvalues, which at realistic feature scales is far
    larger than the result for nearby distributions.
    """
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    Fa, Fb = _psd_factor(a.sigma), _psd_factor(b.sigma)
    cross = float(np.linalg.svd(Fa.T @ Fb, compute_uv=False).sum())
    diff = a.mu - b.mu
    value = float(diff @ diff) + float(np.sum(Fa * Fa) + np.sum(Fb * Fb)) - 2.0 * cross
    return max(value, 0.0)


def fid_score(real: np.ndarray, generated: np.ndarray, basis: EigenBasis, template, m: int = 16) -> float:
    real, generated = np.asarray(real), np.asarray(generated)
    if len(real) == 0 or len(generated) == 0:
        raise ValueError("both mesh sets must be non-empty")
    fr = GaussianFit.fit(mesh_features(real, basis, template, m))
    fg = GaussianFit.fit(mesh_features(generated, basis, template, m))
    return frechet_distance(fr, fg)


def mix_latent(z1, z2, f: float) -> np.ndarray:
    """``(1 - f) z1 + f z2``; ``f`` outside [0, 1] extrapolates."""
    z1, z2 = np.asarray(z1, dtype=np.float64), np.asarray(z2, dtype=np.float64)
    if z1.shape != z2.shape:
        raise ValueError(f"latent shapes differ: {z1.shape} vs {z2.shape}")
    return (1.0 - f) * z1 + f * z2


def _coords(x):
    return x.vertices if isinstance(x, Mesh) else np.asarray(x, dtype=np.float64)


def compose_identity_expression(identity, expression, template):
    """Transfer the deformation ``expression - template`` onto ``identity``.

    Arguments may be :class:`Mesh` objects or vertex arrays. A Mesh result
    is returned when ``identity`` is a Mesh.
    """
    if isinstance(identity, Mesh):
        for other in (expression, template):
            if isinstance(other, Mesh) and not identity.same_topology(other):
                raise ValueError("identity and expression meshes must share the template topology")
    a, e, t = _coords(identity), _coords(expression), _coords(template)
    if not a.shape[-2:] == e.shape[-2:] == t.shape[-2:]:
        raise ValueError(f"topology mismatch: shapes {a.shape}, {e.shape}, {t.shape}")
    out = a + (e - t)
    return identity.with_vertices(out) if isinstance(identity, Mesh) else out


def taubin_smooth(x, laplacian, iterations: int = 10, lam: float = 0.5, mu: float = -0.53):
    """Alternating ``x += lam L x`` and ``x += mu L x`` steps.

    ``laplacian`` is the uniform umbrella operator (a sparse matrix) or a
    Mesh from which it is built. ``x`` has shape (n, 3) or (N, n, 3).
    """
    L = uniform_laplacian(laplacian) if isinstance(laplacian, Mesh) else sp.csr_matrix(laplacian)
    x = np.array(_coords(x), dtype=np.float64)
    batched = x.ndim == 3
    X = np.moveaxis(x, 0, 1).reshape(x.shape[1], -1) if batched else x
    for _ in range(iterations):
        X = X + lam * (L @ X)
        X = X + mu * (L @ X)
    if batched:
        return np.moveaxis(X.reshape(x.shape[1], x.shape[0], x.shape[2]), 1, 0)
    return X


def path_lipschitz(generator: Generator, z1, z2, fs: Sequence[float]) -> float:
    """Largest per-vertex displacement between consecutive decoded grid points, divided by the step."""
    fs = np.asarray(sorted(fs), dtype=np.float64)
    if len(fs) < 2:
        raise ValueError("need at least two grid points")
    meshes = generator.decode(np.stack([mix_latent(z1, z2, f) for f in fs]))
    disp = np.linalg.norm(np.diff(meshes, axis=0), axis=-1).max(axis=-1)
    return float(np.max(disp / np.diff(fs)))

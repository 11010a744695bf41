"""Chebyshev mesh convolutions and the encoder / decoder / discriminator
networks built on a pooling hierarchy.

Networks operate on normalized vertex displacements: ``(x - mean) / scale``
where ``mean`` is the mean training shape and ``scale`` a global standard
deviation (see :class:`SignalCoder`). Parameters live in plain dicts of
arrays keyed by layer name, e.g. ``enc.cheb0.theta`` or ``dec.fc.weight``.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from meshgan._npz import write_npz
from meshgan.diffcore import (
    Tensor,
    add,
    chebyshev_conv,
    elu,
    l1_loss,
    matmul,
    reshape,
    sparse_dense_matmul,
    transpose,
)
from meshgan.hierarchy import Hierarchy
from meshgan.laplacian import SpectralOperator

__all__ = [
    "ModelConfig",
    "ModelParams",
    "SignalCoder",
    "chebconv",
    "encoder_forward",
    "decoder_forward",
    "discriminator_forward",
    "reconstruction_loss",
    "init_params",
    "Checkpoint",
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    widths: tuple = (16, 16, 16, 32)
    K: int = 6
    latent_dim: int = 64
    skip: bool = False

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.K < 1:
            raise ValueError(f"K must be at least 1, got {self.K}")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be positive")

    def decoder_widths(self) -> tuple:
        return tuple(reversed(self.widths))


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict = field(default_factory=dict)

    def copy(self) -> ModelParams:
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.tensors):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.tensors[k]).tobytes())
        return h.hexdigest()

    def as_tensors(self, requires_grad: bool = False) -> dict:
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.tensors.items()}

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))


@dataclass(frozen=True)
class SignalCoder:
    """Maps vertex coordinates to network signals and back."""

    mean: np.ndarray
    scale: float

    @classmethod
    def fit(cls, coords: np.ndarray) -> SignalCoder:
        coords = np.asarray(coords, dtype=np.float64)
        mean = coords.mean(axis=0)
        std = float(np.std(coords - mean))
        return cls(mean, std if std > 0 else 1.0)

    def encode(self, coords: np.ndarray) -> np.ndarray:
        return (np.asarray(coords, dtype=np.float64) - self.mean) / self.scale

    def decode(self, signal: np.ndarray) -> np.ndarray:
        return np.asarray(signal) * self.scale + self.mean


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def chebconv(X, op: SpectralOperator, theta, bias=None) -> Tensor:
    """Chebyshev filter ``sum_j T_j(L) X theta_j + bias`` with ``L`` the rescaled Laplacian.

    ``X`` is vertex-major: (n, F_in) or (n, B, F_in); ``theta`` is
    (K, F_in, F_out).
    """
    X, theta = _t(X), _t(theta)
    K, f_in, f_out = theta.shape
    if X.shape[-1] != f_in or X.shape[0] != op.n:
        raise ValueError(f"chebconv: signal {X.shape} incompatible with theta {theta.shape} on {op.n} vertices")
    out = chebyshev_conv(op.rescaled, X, theta, op.rescaled_t)
    if bias is not None:
        out = add(out, _t(bias))
    return out


def _vertex_major(X):
    """(B, n, F) -> (n, B, F); (n, F) -> (n, 1, F). Returns the squeeze flag too."""
    X = _t(X)
    if X.ndim == 2:
        return reshape(X, (X.shape[0], 1, X.shape[1])), True
    return transpose(X, (1, 0, 2)), False


def encoder_forward(X, params: Mapping, hierarchy: Hierarchy, config: ModelConfig) -> Tensor:
    """Signal on level 0, shape (n, 3) or (B, n, 3) -> latent (h,) or (B, h)."""
    X, squeeze = _vertex_major(X)
    if X.shape[0] != hierarchy.levels[0].n:
        raise ValueError(f"encoder expects {hierarchy.levels[0].n} vertices, got {X.shape[0]}")
    if len(config.widths) != hierarchy.n_levels:
        raise ValueError(f"{len(config.widths)} encoder layers but hierarchy has {hierarchy.n_levels} levels")
    for lvl in range(hierarchy.n_levels):
        X = chebconv(X, hierarchy.spectral_ops[lvl], params[f"enc.cheb{lvl}.theta"], params[f"enc.cheb{lvl}.bias"])
        X = elu(X)
        X = sparse_dense_matmul(hierarchy.down_maps[lvl], X, hierarchy.down_t[lvl])
    B = X.shape[1]
    X = reshape(transpose(X, (1, 0, 2)), (B, -1))
    z = add(matmul(X, params["enc.fc.weight"]), params["enc.fc.bias"])
    return reshape(z, (config.latent_dim,)) if squeeze else z


def decoder_forward(z, params: Mapping, hierarchy: Hierarchy, config: ModelConfig) -> Tensor:
    """Latent (h,) or (B, h) -> signal on level 0, shape (n, 3) or (B, n, 3)."""
    z = _t(z)
    squeeze = z.ndim == 1
    if squeeze:
        z = reshape(z, (1, z.shape[0]))
    if z.shape[1] != config.latent_dim:
        raise ValueError(f"decoder expects latent dim {config.latent_dim}, got {z.shape[1]}")
    B = z.shape[0]
    L = hierarchy.n_levels
    coarse = hierarchy.levels[L].n
    X = add(matmul(z, params["dec.fc.weight"]), params["dec.fc.bias"])
    X = transpose(reshape(X, (B, coarse, config.widths[-1])), (1, 0, 2))
    for j, lvl in enumerate(range(L - 1, -1, -1)):
        X = sparse_dense_matmul(hierarchy.up_maps[lvl], X, hierarchy.up_t[lvl])
        if config.skip:
            s = add(matmul(z, params[f"dec.skip{lvl}.weight"]), params[f"dec.skip{lvl}.bias"])
            s = reshape(s, (B, X.shape[0], X.shape[2]))
            X = add(X, transpose(s, (1, 0, 2)))
        X = chebconv(X, hierarchy.spectral_ops[lvl], params[f"dec.cheb{j}.theta"], params[f"dec.cheb{j}.bias"])
        X = elu(X)
    X = chebconv(X, hierarchy.spectral_ops[0], params["dec.out.theta"], params["dec.out.bias"])
    if squeeze:
        return reshape(X, (X.shape[0], 3))
    return transpose(X, (1, 0, 2))


def discriminator_forward(X, params: Mapping, hierarchy: Hierarchy, config: ModelConfig) -> Tensor:
    """Auto-encoder reconstruction ``decoder(encoder(X))``."""
    return decoder_forward(encoder_forward(X, params, hierarchy, config), params, hierarchy, config)


def reconstruction_loss(X, params: Mapping, hierarchy: Hierarchy, config: ModelConfig) -> Tensor:
    """L1 distance between a signal batch and its auto-encoder reconstruction."""
    X = _t(X)
    return l1_loss(X, discriminator_forward(X, params, hierarchy, config))


def _layer_shapes(config: ModelConfig, hierarchy: Hierarchy, parts) -> dict:
    shapes: dict = {}
    L = hierarchy.n_levels
    if len(config.widths) != L:
        raise ValueError(f"config has {len(config.widths)} widths but hierarchy has {L} levels")
    sizes = hierarchy.sizes
    K, h = config.K, config.latent_dim
    if "encoder" in parts:
        f_in = 3
        for lvl, w in enumerate(config.widths):
            shapes[f"enc.cheb{lvl}.theta"] = (K, f_in, w)
            shapes[f"enc.cheb{lvl}.bias"] = (w,)
            f_in = w
        shapes["enc.fc.weight"] = (sizes[L] * config.widths[-1], h)
        shapes["enc.fc.bias"] = (h,)
    if "decoder" in parts:
        shapes["dec.fc.weight"] = (h, sizes[L] * config.widths[-1])
        shapes["dec.fc.bias"] = (sizes[L] * config.widths[-1],)
        f_in = config.widths[-1]
        for j, (lvl, w) in enumerate(zip(range(L - 1, -1, -1), config.decoder_widths())):
            if config.skip:
                shapes[f"dec.skip{lvl}.weight"] = (h, sizes[lvl] * f_in)
                shapes[f"dec.skip{lvl}.bias"] = (sizes[lvl] * f_in,)
            shapes[f"dec.cheb{j}.theta"] = (K, f_in, w)
            shapes[f"dec.cheb{j}.bias"] = (w,)
            f_in = w
        shapes["dec.out.theta"] = (K, f_in, 3)
        shapes["dec.out.bias"] = (3,)
    return shapes


def init_params(config: ModelConfig, hierarchy: Hierarchy, seed: int | np.random.Generator = 0,
                parts=("encoder", "decoder")) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    tensors = {}
    for name, shape in _layer_shapes(config, hierarchy, parts).items():
        if name.endswith("bias"):
            tensors[name] = np.zeros(shape)
            continue
        # a Chebyshev kernel acts as one (K*F_in, F_out) matrix on the stacked polynomial terms
        fan_in, fan_out = int(np.prod(shape[:-1])), shape[-1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        tensors[name] = rng.uniform(-limit, limit, size=shape)
    return ModelParams(config, tensors)


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    models: dict
    coder: SignalCoder
    hierarchy_checksum: str
    meta: dict = field(default_factory=dict)

    @property
    def mode(self) -> str:
        return self.meta.get("mode", "began")

    @property
    def generator(self) -> ModelParams:
        """Decoder-bearing parameter set used to synthesize meshes."""
        return self.models["G"] if "G" in self.models else self.models["AE"]


def save_checkpoint(path: str | os.PathLike, models: Mapping[str, ModelParams], coder: SignalCoder,
                    hierarchy: Hierarchy, meta: Mapping | None = None) -> None:
    """Write an ``.npz`` container.

    Keys: ``meta`` (JSON string: format version, hierarchy checksum, model
    configs, tensor index, plus caller metadata such as config echo and seed),
    ``coder_mean``, ``coder_scale`` and one float64 array per tensor named
    ``<model>/<tensor>``.
    """
    index = {name: {k: list(v.shape) for k, v in sorted(p.tensors.items())} for name, p in models.items()}
    header = dict(meta or {})
    header.update(
        format_version=CHECKPOINT_VERSION,
        hierarchy_checksum=hierarchy.checksum,
        model_configs={name: asdict(p.config) for name, p in models.items()},
        tensors=index,
    )
    arrays = {"meta": np.array(json.dumps(header, sort_keys=True)),
              "coder_mean": coder.mean, "coder_scale": np.array(coder.scale)}
    for name, p in models.items():
        for k, v in p.tensors.items():
            arrays[f"{name}/{k}"] = np.asarray(v, dtype=np.float64)
    write_npz(path, arrays)


def load_checkpoint(path: str | os.PathLike, hierarchy: Hierarchy | None = None) -> Checkpoint:
    """Read a checkpoint; refuses one written against a different hierarchy."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint format {meta.get('format_version')}")
        if hierarchy is not None and meta["hierarchy_checksum"] != hierarchy.checksum:
            raise CheckpointError(f"{path}: checkpoint was trained on a different hierarchy")
        models = {}
        for name, index in meta["tensors"].items():
            cfg = meta["model_configs"][name]
            config = ModelConfig(widths=tuple(cfg["widths"]), K=cfg["K"], latent_dim=cfg["latent_dim"],
                                 skip=cfg["skip"])
            models[name] = ModelParams(config, {k: np.array(data[f"{name}/{k}"]) for k in index})
        coder = SignalCoder(np.array(data["coder_mean"]), float(data["coder_scale"]))
    return Checkpoint(models, coder, meta["hierarchy_checksum"], meta)

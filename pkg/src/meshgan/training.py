"""BEGAN adversarial training and the plain auto-encoder baseline.

Both trainers work on normalized signals (see :class:`~meshgan.models.SignalCoder`)
and share one optimizer: SGD with classical momentum, ``v <- mu v + g``,
``p <- p - lr v``, with the learning rate multiplied by ``lr_decay`` after
every epoch. Every random draw (initialization, shuffling, latent samples)
comes from a single generator seeded by ``TrainConfig.seed``.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np

from meshgan.diffcore import Tape, add, backward, l1_loss, scale, slice_
from meshgan.hierarchy import Hierarchy
from meshgan.models import (
    ModelConfig,
    ModelParams,
    SignalCoder,
    decoder_forward,
    discriminator_forward,
    init_params,
    save_checkpoint,
)

__all__ = [
    "TrainConfig",
    "TrainState",
    "StepLosses",
    "TrainResult",
    "TrainingDiverged",
    "k_update",
    "convergence_measure",
    "momentum_update",
    "sample_latent",
    "began_step",
    "autoencoder_step",
    "train_began",
    "train_autoencoder",
    "BEGAN_LOG_FIELDS",
    "AE_LOG_FIELDS",
]

log = logging.getLogger(__name__)

BEGAN_LOG_FIELDS = ("step", "epoch", "loss_real", "loss_fake_D", "loss_G", "k", "lr", "M")
AE_LOG_FIELDS = ("step", "epoch", "loss", "lr")


class TrainingDiverged(FloatingPointError):
    """A loss became non-finite; ``checkpoint`` names the diagnostic dump."""

    def __init__(self, message: str, checkpoint: str | None = None):
        self.checkpoint = checkpoint
        super().__init__(message if checkpoint is None else f"{message}; diagnostic checkpoint {checkpoint}")


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.7
    lambda_k: float = 0.001
    lr: float = 0.008
    lr_decay: float = 0.99
    momentum: float = 0.9
    epochs: int = 300
    batch_size: int = 16
    latent_dim: int = 64
    seed: int = 0
    skip_connections: bool = False
    widths: tuple = (16, 16, 16, 32)
    K: int = 6

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        problems = []
        if not 0.0 <= self.gamma <= 1.0:
            problems.append(f"gamma must lie in [0, 1], got {self.gamma}")
        if not self.lr > 0:
            problems.append(f"lr must be positive, got {self.lr}")
        if not self.lr_decay > 0:
            problems.append(f"lr_decay must be positive, got {self.lr_decay}")
        if not 0.0 <= self.momentum < 1.0:
            problems.append(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.epochs < 0 or self.batch_size < 1 or self.latent_dim < 1:
            problems.append("epochs must be >= 0, batch_size and latent_dim >= 1")
        if problems:
            raise ValueError("; ".join(problems))

    def model_config(self) -> ModelConfig:
        return ModelConfig(widths=self.widths, K=self.K, latent_dim=self.latent_dim, skip=self.skip_connections)


@dataclass
class TrainState:
    """Mutable optimizer and equilibrium state.

    ``velocity`` maps a model name to one momentum slot per parameter tensor.
    ``convergence`` is the most recent convergence measure ``M``.
    """

    lr: float
    rng: np.random.Generator
    k: float = 0.0
    step: int = 0
    epoch: int = 0
    velocity: dict = field(default_factory=dict)
    convergence: float = math.nan

    @classmethod
    def initial(cls, config: TrainConfig, rng: np.random.Generator | None = None) -> TrainState:
        return cls(lr=config.lr, rng=rng if rng is not None else np.random.default_rng(config.seed))

    def end_epoch(self, lr_decay: float) -> None:
        self.epoch += 1
        self.lr *= lr_decay


@dataclass(frozen=True)
class StepLosses:
    loss_real: float
    loss_fake_D: float
    loss_G: float
    k: float
    M: float


@dataclass
class TrainResult:
    models: dict
    coder: SignalCoder
    state: TrainState
    log: list
    checkpoints: list = field(default_factory=list)


def k_update(k: float, loss_real: float, loss_fake: float, gamma: float, lambda_k: float) -> float:
    """``clamp(k + lambda_k (gamma L(x) - L(G(z))), 0, 1)``."""
    return float(min(1.0, max(0.0, k + lambda_k * (gamma * loss_real - loss_fake))))


def convergence_measure(loss_real: float, loss_fake: float, gamma: float) -> float:
    return float(loss_real + abs(gamma * loss_real - loss_fake))


def momentum_update(params: ModelParams, grads: Mapping[str, np.ndarray], velocity: dict,
                    lr: float, momentum: float) -> ModelParams:
    """In-place momentum step on every tensor that has a gradient."""
    for name, g in grads.items():
        p = params.tensors[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        v = velocity.get(name)
        v = g.copy() if v is None else momentum * v + g
        velocity[name] = v
        p -= lr * v
    return params


def sample_latent(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=(count, dim))


def _grads(tensors: Mapping) -> dict:
    return {k: (t.grad if t.grad is not None else np.zeros(t.shape)) for k, t in tensors.items()}


def _finite(*values) -> bool:
    return all(math.isfinite(v) for v in values)


def began_step(batch: np.ndarray, state: TrainState, D: ModelParams, G: ModelParams,
               hierarchy: Hierarchy, config: TrainConfig) -> StepLosses:
    """One discriminator update, one generator update, then the ``k`` update.

    ``batch`` holds normalized signals, shape (B, n, 3). ``D`` and ``G`` are
    modified in place; ``state`` advances by one step. Raises
    :class:`TrainingDiverged` before touching any parameter if a loss is
    non-finite.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 3 or batch.shape[0] == 0:
        raise ValueError(f"batch must have shape (B, n, 3) with B > 0, got {batch.shape}")
    B, h = batch.shape[0], config.latent_dim
    z_D = sample_latent(state.rng, B, h)
    z_G = sample_latent(state.rng, B, h)
    dcfg, gcfg = D.config, G.config

    # discriminator: real and fake reconstructions share one batched pass
    fake = decoder_forward(z_D, G.tensors, hierarchy, gcfg).values
    both = np.concatenate([batch, fake], axis=0)
    d_vars = D.as_tensors(requires_grad=True)
    with Tape():
        recon = discriminator_forward(both, d_vars, hierarchy, dcfg)
        loss_real = l1_loss(slice_(recon, slice(0, B)), batch)
        loss_fake_D = l1_loss(slice_(recon, slice(B, 2 * B)), fake)
        loss_D = add(loss_real, scale(loss_fake_D, -state.k))
    lr_, lf_ = loss_real.item(), loss_fake_D.item()
    if not _finite(lr_, lf_):
        raise TrainingDiverged(f"non-finite discriminator loss at step {state.step}: L(x)={lr_}, L(G(z_D))={lf_}")
    backward(loss_D)
    momentum_update(D, _grads(d_vars), state.velocity.setdefault("D", {}), state.lr, config.momentum)

    # generator: gradients flow through D's input only, D's weights are constants here
    g_vars = G.as_tensors(requires_grad=True)
    with Tape():
        generated = decoder_forward(z_G, g_vars, hierarchy, gcfg)
        loss_G = l1_loss(generated, discriminator_forward(generated, D.tensors, hierarchy, dcfg))
    lg_ = loss_G.item()
    if not _finite(lg_):
        raise TrainingDiverged(f"non-finite generator loss at step {state.step}: L(G(z_G))={lg_}")
    backward(loss_G)
    momentum_update(G, _grads(g_vars), state.velocity.setdefault("G", {}), state.lr, config.momentum)

    state.k = k_update(state.k, lr_, lg_, config.gamma, config.lambda_k)
    state.convergence = convergence_measure(lr_, lg_, config.gamma)
    state.step += 1
    return StepLosses(lr_, lf_, lg_, state.k, state.convergence)


def autoencoder_step(batch: np.ndarray, state: TrainState, AE: ModelParams, hierarchy: Hierarchy,
                     config: TrainConfig) -> float:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 3 or batch.shape[0] == 0:
        raise ValueError(f"batch must have shape (B, n, 3) with B > 0, got {batch.shape}")
    variables = AE.as_tensors(requires_grad=True)
    with Tape():
        loss = l1_loss(discriminator_forward(batch, variables, hierarchy, AE.config), batch)
    value = loss.item()
    if not _finite(value):
        raise TrainingDiverged(f"non-finite reconstruction loss at step {state.step}")
    backward(loss)
    momentum_update(AE, _grads(variables), state.velocity.setdefault("AE", {}), state.lr, config.momentum)
    state.step += 1
    return value


def _batches(rng: np.random.Generator, count: int, size: int):
    order = rng.permutation(count)
    for start in range(0, count, size):
        yield order[start:start + size]


class _CsvLog:
    def __init__(self, path, fields):
        self.rows: list[dict] = []
        self.fields = fields
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", newline="", encoding="utf-8")
            self._writer = csv.DictWriter(self._fh, fieldnames=fields, lineterminator="\n")
            self._writer.writeheader()

    def append(self, row: dict) -> None:
        self.rows.append(row)
        if self._fh is not None:
            self._writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def _prepare(train: np.ndarray, hierarchy: Hierarchy, coder: SignalCoder | None):
    train = np.asarray(train, dtype=np.float64)
    if train.ndim != 3 or train.shape[0] == 0 or train.shape[1:] != (hierarchy.levels[0].n, 3):
        raise ValueError(f"training data must have shape (N, {hierarchy.levels[0].n}, 3), got {train.shape}")
    coder = coder if coder is not None else SignalCoder.fit(train)
    return coder, coder.encode(train)


def _meta(mode: str, config: TrainConfig, state: TrainState, **extra) -> dict:
    meta = dict(mode=mode, train_config=asdict(config), epoch=state.epoch, step=state.step, k=state.k,
                lr=state.lr, seed=config.seed)
    meta.update(extra)
    return meta


def train_began(train: np.ndarray, config: TrainConfig, hierarchy: Hierarchy,
                out_dir: str | os.PathLike | None = None, coder: SignalCoder | None = None,
                on_epoch: Callable[[int, dict], None] | None = None) -> TrainResult:
    """Adversarial training on raw vertex arrays ``train`` of shape (N, n, 3).

    With ``out_dir`` set, writes ``metrics.csv`` (one row per step) and
    ``checkpoint_epoch{e:04d}.npz`` after every epoch, ``e`` counting from
    1. ``checkpoint_epoch0000.npz`` holds the untrained initialization.
    On a non-finite loss the parameters from just before the failing step
    go to ``diagnostic.npz`` and :class:`TrainingDiverged` is raised; the
    per-epoch checkpoints already written are left untouched.
    """
    coder, signals = _prepare(train, hierarchy, coder)
    rng = np.random.default_rng(config.seed)
    mcfg = config.model_config()
    D = init_params(mcfg, hierarchy, rng, parts=("encoder", "decoder"))
    G = init_params(mcfg, hierarchy, rng, parts=("decoder",))
    state = TrainState.initial(config, rng)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    metrics = _CsvLog(os.path.join(out_dir, "metrics.csv") if out_dir else None, BEGAN_LOG_FIELDS)
    result = TrainResult({"D": D, "G": G}, coder, state, metrics.rows)

    def checkpoint(name, **extra):
        path = os.path.join(out_dir, name)
        save_checkpoint(path, result.models, coder, hierarchy, _meta("began", config, state, **extra))
        return path

    try:
        if out_dir:
            result.checkpoints.append(checkpoint("checkpoint_epoch0000.npz"))
        for _ in range(config.epochs):
            for idx in _batches(rng, len(signals), config.batch_size):
                snapshot = (D.copy(), G.copy()) if out_dir else None
                try:
                    losses = began_step(signals[idx], state, D, G, hierarchy, config)
                except TrainingDiverged as exc:
                    if out_dir is None:
                        raise
                    result.models = {"D": snapshot[0], "G": snapshot[1]}
                    raise TrainingDiverged(str(exc), checkpoint("diagnostic.npz", reason=str(exc))) from None
                metrics.append(dict(step=state.step, epoch=state.epoch + 1, loss_real=losses.loss_real,
                                    loss_fake_D=losses.loss_fake_D, loss_G=losses.loss_G, k=losses.k,
                                    lr=state.lr, M=losses.M))
            state.end_epoch(config.lr_decay)
            if out_dir:
                result.checkpoints.append(checkpoint(f"checkpoint_epoch{state.epoch:04d}.npz"))
            log.info("epoch %d: k=%.4f M=%.4f lr=%.5f", state.epoch, state.k, state.convergence, state.lr)
            if on_epoch is not None:
                on_epoch(state.epoch, result.models)
    finally:
        metrics.close()
    return result


def train_autoencoder(train: np.ndarray, config: TrainConfig, hierarchy: Hierarchy,
                      out_dir: str | os.PathLike | None = None, coder: SignalCoder | None = None,
                      on_epoch: Callable[[int, dict], None] | None = None) -> TrainResult:
    """Reconstruction-only training of the encoder/decoder pair (model name ``AE``).

    Output files mirror :func:`train_began`; the metrics log has columns
    ``step, epoch, loss, lr``.
    """
    coder, signals = _prepare(train, hierarchy, coder)
    rng = np.random.default_rng(config.seed)
    AE = init_params(config.model_config(), hierarchy, rng, parts=("encoder", "decoder"))
    state = TrainState.initial(config, rng)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    metrics = _CsvLog(os.path.join(out_dir, "metrics.csv") if out_dir else None, AE_LOG_FIELDS)
    result = TrainResult({"AE": AE}, coder, state, metrics.rows)

    def checkpoint(name, **extra):
        path = os.path.join(out_dir, name)
        save_checkpoint(path, result.models, coder, hierarchy, _meta("ae", config, state, **extra))
        return path

    try:
        if out_dir:
            result.checkpoints.append(checkpoint("checkpoint_epoch0000.npz"))
        for _ in range(config.epochs):
            for idx in _batches(rng, len(signals), config.batch_size):
                snapshot = AE.copy() if out_dir else None
                try:
                    loss = autoencoder_step(signals[idx], state, AE, hierarchy, config)
                except TrainingDiverged as exc:
                    if out_dir is None:
                        raise
                    result.models = {"AE": snapshot}
                    raise TrainingDiverged(str(exc), checkpoint("diagnostic.npz", reason=str(exc))) from None
                metrics.append(dict(step=state.step, epoch=state.epoch + 1, loss=loss, lr=state.lr))
            state.end_epoch(config.lr_decay)
            if out_dir:
                result.checkpoints.append(checkpoint(f"checkpoint_epoch{state.epoch:04d}.npz"))
            log.info("epoch %d: loss=%.4f lr=%.5f", state.epoch, metrics.rows[-1]["loss"], state.lr)
            if on_epoch is not None:
                on_epoch(state.epoch, result.models)
    finally:
        metrics.close()
    return result

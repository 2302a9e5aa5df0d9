"""Optimisation loop: Adam, target standardization, early stopping.

Training shuffles the train rows into mini-batches; for the anchor-based
variant each batch forward pulls in the current anchor members, so the
full family is never required. Validation Spearman drives model selection
and the returned parameters are the ones from the best validation epoch.
Everything is reproducible from (seed, config, data).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Family, Graph, SplitAssignment
from .evaluation import spearman
from .model import ModelConfig, ModelParams, build_forward, init_params, mse_loss
from .residue_encoder import NumericsError


class TrainingError(RuntimeError):
    """Raised when optimisation cannot proceed (e.g. divergence)."""


@dataclass
class TrainConfig:
    lr: float = 5e-4
    epochs: int = 300
    batch_size: int = 64
    patience: int = 30
    seed: int = 0
    standardize_targets: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        for name in ("epochs", "batch_size", "patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def to_json(self) -> dict:
        return {
            "lr": self.lr,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "patience": self.patience,
            "seed": self.seed,
            "standardize_targets": self.standardize_targets,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**doc)


class Adam:
    """Adaptive-moment optimiser over a dict of named arrays."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1**self.t
        correction2 = 1.0 - self.beta2**self.t
        for name, value in tensors.items():
            g = grads.get(name)
            if g is None:
                continue
            if name not in self._m:
                self._m[name] = np.zeros_like(value)
                self._v[name] = np.zeros_like(value)
            m, v = self._m[name], self._v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            m_hat = m / correction1
            v_hat = v / correction2
            value -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def standardize_targets(
    y_train: np.ndarray, y_all: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Standardize targets with train-only statistics (population std).

    Zero-variance components keep sigma = 1 so the transform degrades to
    centering.
    """
    y_train = np.atleast_2d(np.asarray(y_train, dtype=np.float64))
    y_all = np.atleast_2d(np.asarray(y_all, dtype=np.float64))
    mu = y_train.mean(axis=0)
    sigma = y_train.std(axis=0)
    sigma = np.where(sigma > 0, sigma, 1.0)
    return (y_all - mu) / sigma, mu, sigma


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    valid_rho: float | None
    seconds: float

    def to_json(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "valid_rho": self.valid_rho,
            "seconds": round(self.seconds, 6),
        }


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = -1
    best_valid_rho: float | None = None

    def signature(self) -> dict:
        """Deterministic content (wall-clock excluded) for equality checks."""
        return {
            "best_epoch": self.best_epoch,
            "best_valid_rho": self.best_valid_rho,
            "train_loss": [e.train_loss for e in self.epochs],
            "valid_rho": [e.valid_rho for e in self.epochs],
        }


def train(
    family: Family,
    split: SplitAssignment,
    model_config: ModelConfig,
    train_config: TrainConfig,
    *,
    graph: Graph | None = None,
    protein_feats: np.ndarray | None = None,
    residue_feats: np.ndarray | None = None,
    log_path=None,
) -> tuple[ModelParams, TrainReport]:
    """Fit the model, returning the best-validation-epoch parameters."""
    train_rows = split.rows(family, "train")
    valid_rows = split.rows(family, "valid")
    if not train_rows:
        raise TrainingError("split has no training rows")
    if not valid_rows:
        raise TrainingError("split has no validation rows")
    train_ids = [family.ids[i] for i in train_rows]

    params = init_params(model_config, family.n, seed=train_config.seed)
    if train_config.standardize_targets:
        y_std, mu, sigma = standardize_targets(
            family.targets[train_rows], family.targets
        )
    else:
        y_std = family.targets.astype(np.float64)
        mu = np.zeros(family.theta)
        sigma = np.ones(family.theta)
    # Buffers follow the model dtype so float32 checkpoints round-trip bitwise.
    mu = mu.astype(model_config.np_dtype)
    sigma = sigma.astype(model_config.np_dtype)
    params.buffers["target_mean"] = mu
    params.buffers["target_std"] = sigma
    y_raw_valid = family.targets[valid_rows, 0]

    rng = np.random.default_rng(train_config.seed)
    optimiser = Adam(
        train_config.lr, train_config.beta1, train_config.beta2, train_config.eps
    )
    report = TrainReport()
    best_params = params.copy()
    best_rho = -np.inf
    stall = 0
    step = 0
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(train_config.epochs):
            started = time.perf_counter()
            order = rng.permutation(len(train_rows))
            losses = []
            for lo in range(0, len(order), train_config.batch_size):
                # Sorting keeps the loss independent of shuffle order within
                # a batch; membership is what the shuffle decides.
                batch = sorted(train_rows[i] for i in order[lo : lo + train_config.batch_size])
                step += 1
                draw = step if model_config.resample_anchors else 0
                try:
                    fg = build_forward(
                        family,
                        params,
                        model_config,
                        rows=batch,
                        train_ids=train_ids,
                        anchor_draw=draw,
                        graph=graph,
                        protein_feats=protein_feats,
                        residue_feats=residue_feats,
                    )
                    loss = mse_loss(fg.y_hat, y_std[batch])
                except NumericsError as err:
                    raise TrainingError(
                        f"diverged at epoch {epoch}, "
                        f"batch {lo // train_config.batch_size}: {err}"
                    ) from err
                loss_value = float(loss.data)
                if not np.isfinite(loss_value):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, batch {lo // train_config.batch_size}"
                    )
                loss.backward()
                optimiser.step(params.tensors, fg.grads())
                losses.append(loss_value)

            try:
                valid_fg = build_forward(
                    family,
                    params,
                    model_config,
                    rows=valid_rows,
                    train_ids=train_ids,
                    anchor_draw=0,
                    graph=graph,
                    protein_feats=protein_feats,
                    residue_feats=residue_feats,
                )
            except NumericsError as err:
                raise TrainingError(
                    f"diverged at epoch {epoch} during validation: {err}"
                ) from err
            pred_valid = valid_fg.y_hat.data[:, 0] * sigma[0] + mu[0]
            try:
                rho = spearman(pred_valid, y_raw_valid)
            except ValueError:
                rho = None
            stats = EpochStats(
                epoch=epoch,
                train_loss=float(np.mean(losses)),
                valid_rho=rho,
                seconds=time.perf_counter() - started,
            )
            report.epochs.append(stats)
            if log_fh:
                log_fh.write(json.dumps(stats.to_json()) + "\n")
            if rho is not None and rho > best_rho:
                best_rho = rho
                best_params = params.copy()
                report.best_epoch = epoch
                report.best_valid_rho = rho
                stall = 0
            else:
                stall += 1
                if stall > train_config.patience:
                    break
    finally:
        if log_fh:
            log_fh.close()
    if report.best_epoch < 0:
        # Validation rho never became defined; fall back to the last state.
        best_params = params.copy()
    best_params.buffers["target_mean"] = mu
    best_params.buffers["target_std"] = sigma
    return best_params, report

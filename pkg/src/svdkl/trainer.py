"""Adam-based training loops: offline with early stopping, warm start, and
streaming updates on fixed-size batches."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .data import Dataset
from .errors import EmptyDataset, NotWarmStarted, WrongBatchSize
from .svgp import (
    Predictor,
    SvdklModel,
    get_params,
    param_group,
    set_params,
    total_elbo_and_grads,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 200
    patience: int = 15
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # per-group overrides: "extractor", "kernel", "inducing", "variational"
    group_lr: dict = field(default_factory=dict)
    freeze: tuple = ()
    warm_start_epochs: int = 60
    warm_start_valid_fraction: float = 0.1
    online_batch_size: int = 100
    online_steps: int = 10
    online_learning_rate: float | None = None
    # parameter groups held fixed during streaming updates; None reuses ``freeze``
    online_freeze: tuple | None = None

    def __post_init__(self):
        if not 0.0 < self.adam_beta1 < self.adam_beta2 < 1.0:
            raise ValueError("need 0 < beta1 < beta2 < 1")
        if self.patience < 1 or self.batch_size < 1 or self.online_batch_size < 1:
            raise ValueError("patience and batch sizes must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(
    state: AdamState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    config: TrainConfig,
    learning_rate: float | None = None,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam step that *descends* ``grads``.

    Parameters absent from ``grads`` are left alone. Returns new parameter
    arrays and a new state; inputs are not modified.
    """
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    base_lr = config.learning_rate if learning_rate is None else learning_rate
    t = state.t + 1
    new_m, new_v, out = dict(state.m), dict(state.v), dict(params)
    for name, g in grads.items():
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * g * g
        new_m[name], new_v[name] = m, v
        lr = config.group_lr.get(param_group(name), base_lr) if "." in name else base_lr
        mhat = m / (1.0 - b1**t)
        vhat = v / (1.0 - b2**t)
        out[name] = params[name] - lr * mhat / (np.sqrt(vhat) + eps)
    return out, AdamState(new_m, new_v, t)


def _trainable(grads: dict, freeze) -> dict:
    if not freeze:
        return grads
    return {k: v for k, v in grads.items() if param_group(k) not in freeze}


def ascent_step(
    model: SvdklModel,
    state: AdamState,
    xn: np.ndarray,
    yn: np.ndarray,
    total_n: int,
    config: TrainConfig,
    learning_rate: float | None = None,
) -> tuple[float, AdamState]:
    """Evaluate the ELBO on a normalized batch and take one Adam ascent step in place."""
    elbo, grads, _ = total_elbo_and_grads(model, xn, yn, total_n)
    grads = {k: -v for k, v in _trainable(grads, config.freeze).items()}
    params = get_params(model)
    new, state = adam_step(state, {k: params[k] for k in grads}, grads, config, learning_rate)
    set_params(model, new)
    model.version += 1
    return elbo, state


@dataclass
class EpochRecord:
    epoch: int
    elbo: float
    rmse: np.ndarray
    seconds: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    initial_rmse: np.ndarray | None = None
    best_epoch: int = 0

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self, path: str | Path) -> None:
        n = len(self.records[0].rmse) if self.records else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "elbo"] + [f"rmse_task_{i}" for i in range(1, n + 1)] + ["seconds"])
            for r in self.records:
                w.writerow([r.epoch, f"{r.elbo:.17g}", *(f"{x:.17g}" for x in r.rmse), f"{r.seconds:.6f}"])


def validation_rmse(model: SvdklModel, valid: Dataset) -> np.ndarray:
    means, _ = Predictor(model)(valid.inputs)
    return np.sqrt(np.mean((means - valid.targets) ** 2, axis=0))


def train_offline(
    model: SvdklModel,
    train: Dataset,
    valid: Dataset | None,
    config: TrainConfig,
    metric_fn: Callable[[SvdklModel], np.ndarray] | None = None,
) -> tuple[SvdklModel, TrainHistory]:
    """Minibatch ELBO ascent with early stopping on mean validation RMSE.

    Works on a private copy of ``model`` and returns the snapshot with the
    best validation metric (the initial model counts as epoch 0). Without
    validation data every epoch up to ``max_epochs`` runs and the final
    state is returned.
    """
    if len(train) == 0:
        raise EmptyDataset("training set is empty")
    history = TrainHistory()
    work = model.copy()
    if config.max_epochs == 0:
        return work, history
    if metric_fn is None and valid is not None and len(valid) > 0:
        metric_fn = lambda m: validation_rmse(m, valid)  # noqa: E731
    rng = np.random.default_rng(config.seed)
    xn = work.normalize_inputs(train.inputs)
    yn = work.normalize_targets(train.targets)
    n = len(train)
    bs = min(config.batch_size, n)
    state = AdamState()
    best_model, best_metric, since_best = work.copy(), np.inf, 0
    if metric_fn is not None:
        history.initial_rmse = np.asarray(metric_fn(work))
        best_metric = float(np.mean(history.initial_rmse))
    start = time.perf_counter()
    for epoch in range(1, config.max_epochs + 1):
        perm = rng.permutation(n)
        elbos = []
        for i in range(0, n - bs + 1, bs):
            idx = perm[i : i + bs]
            e, state = ascent_step(work, state, xn[idx], yn[idx], n, config)
            elbos.append(e)
        rmse = np.asarray(metric_fn(work)) if metric_fn is not None else np.full(work.n_tasks, np.nan)
        history.records.append(
            EpochRecord(epoch, float(np.mean(elbos)), rmse, time.perf_counter() - start)
        )
        if metric_fn is None:
            continue
        metric = float(np.mean(rmse))
        if metric < best_metric:
            best_metric, since_best = metric, 0
            best_model = work.copy()
            history.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= config.patience:
                log.info("early stop at epoch %d (best %d)", epoch, history.best_epoch)
                break
    if metric_fn is None:
        history.best_epoch = len(history.records)
        return work, history
    return best_model, history


def warm_start(model: SvdklModel, trajectories: Dataset, config: TrainConfig) -> SvdklModel:
    """Freeze normalization statistics on ``trajectories``, train offline for
    ``warm_start_epochs`` and mark the model ready for online updates."""
    trajectories.require_nonempty()
    out = model.copy()
    out.input_mean = trajectories.input_mean.copy()
    out.input_std = trajectories.input_std.copy()
    for h, mu, sd in zip(out.heads, trajectories.target_mean, trajectories.target_std):
        h.target_mean, h.target_std = float(mu), float(sd)
    if config.warm_start_epochs > 0:
        n = len(trajectories)
        n_valid = int(round(config.warm_start_valid_fraction * n))
        perm = np.random.default_rng(config.seed).permutation(n)
        train = trajectories.subset(perm[n_valid:])
        valid = trajectories.subset(perm[:n_valid]) if n_valid > 0 else None
        cfg = replace(config, max_epochs=config.warm_start_epochs)
        out, _ = train_offline(out, train, valid, cfg)
    out.online_ready = True
    out.n_seen = len(trajectories)
    return out


def train_online_step(
    model: SvdklModel,
    inputs,
    targets,
    config: TrainConfig,
    adam: AdamState | None = None,
) -> tuple[SvdklModel, AdamState]:
    """Take ``online_steps`` Adam steps on one batch of exactly
    ``online_batch_size`` observations and publish a new snapshot.

    The ELBO is scaled by the running observation count (warm-start data
    included). ``model`` itself is never modified.
    """
    if not model.online_ready:
        raise NotWarmStarted("call warm_start before streaming updates")
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    y = np.asarray(targets, dtype=np.float64).reshape(x.shape[0], -1)
    if x.shape[0] != config.online_batch_size:
        raise WrongBatchSize(f"expected {config.online_batch_size} observations, got {x.shape[0]}")
    out = model.copy()
    out.n_seen += x.shape[0]
    xn, yn = out.normalize_inputs(x), out.normalize_targets(y)
    state = adam if adam is not None else AdamState()
    lr = config.online_learning_rate or config.learning_rate
    if config.online_freeze is not None:
        config = replace(config, freeze=tuple(config.online_freeze))
    for _ in range(config.online_steps):
        _, state = ascent_step(out, state, xn, yn, out.n_seen, config, lr)
    out.version = model.version + 1
    return out, state


class OnlineLearner:
    """Single writer of model snapshots during a streaming run."""

    def __init__(self, model: SvdklModel, config: TrainConfig):
        if not model.online_ready:
            raise NotWarmStarted("call warm_start before streaming updates")
        self.model = model
        self.config = config
        self.adam = AdamState()

    def step(self, inputs, targets) -> SvdklModel:
        self.model, self.adam = train_online_step(
            self.model, inputs, targets, self.config, self.adam
        )
        return self.model

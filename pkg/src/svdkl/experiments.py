"""Experiment drivers: data generation, offline model comparison, training
time scaling, variance shrinkage and the online variable-gain run."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .controller import GainConfig, Trace, run_closed_loop
from .data import Dataset, evaluate, split
from .dynamics import (
    ManipulatorParams,
    TrajectorySpec,
    default_plant,
    mirrored,
    random_trajectory,
    sample_dataset,
)
from .svgp import Predictor, SvdklModel, init_model
from .trainer import TrainConfig, train_offline, warm_start

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# data


def trajectory_dataset(
    n_traj: int,
    seed: int = 0,
    plant: ManipulatorParams | None = None,
    duration: float = 2.0,
    sample_dt: float = 0.01,
    payload_range: tuple[float, float] | None = None,
    torque_noise: float = 0.0,
    mirror: bool = False,
    **traj_kw,
) -> Dataset:
    """Inverse-dynamics samples along ``n_traj`` random rhythmic references.

    With ``payload_range`` each trajectory is a pick-and-place cycle: a
    payload of uniform random mass is grasped in the first half of the
    trajectory and released in the second half.
    """
    rng = np.random.default_rng(seed)
    plant = plant or default_plant()
    parts = []
    for _ in range(n_traj):
        spec = random_trajectory(rng, plant.dof, duration, **traj_kw)
        if mirror:
            spec = mirrored(spec)
        schedule = None
        if payload_range is not None:
            grasp = rng.uniform(0.15, 0.35) * duration
            release = rng.uniform(0.65, 0.85) * duration
            schedule = [(grasp, release, rng.uniform(*payload_range))]
        x, y = sample_dataset(plant, spec, sample_dt, torque_noise, rng, schedule)
        parts.append(Dataset(x, y))
    return Dataset.concat(parts)


# ---------------------------------------------------------------------------
# offline comparison


@dataclass
class ModelSettings:
    n_inducing: int = 128
    hidden: tuple = (64, 64)
    feature_dim: int = 8
    activation: str = "relu"


def fit(
    kind: str,
    train: Dataset,
    valid: Dataset | None,
    config: TrainConfig,
    settings: ModelSettings = ModelSettings(),
):
    model = init_model(
        train.inputs, train.targets, kind, settings.n_inducing, settings.hidden,
        settings.feature_dim, settings.activation, seed=config.seed,
    )
    return train_offline(model, train, valid, config)


def compare_models(
    data: Dataset,
    seeds: Sequence[int] = (0, 1, 2),
    config: TrainConfig = TrainConfig(),
    settings: ModelSettings = ModelSettings(),
    kinds: Sequence[str] = ("svgp", "svdkl"),
) -> dict[str, np.ndarray]:
    """Mean test RMSE over tasks, one entry per seed, for each model kind."""
    out = {k: [] for k in kinds}
    for seed in seeds:
        train, valid, test = split(data, seed=seed)
        for kind in kinds:
            model, hist = fit(kind, train, valid, replace(config, seed=seed), settings)
            rmse = evaluate(model, test).mean_rmse
            log.info("seed %d %s: %d epochs, test rmse %.4f", seed, kind, len(hist), rmse)
            out[kind].append(rmse)
    return {k: np.array(v) for k, v in out.items()}


# ---------------------------------------------------------------------------
# training-time scaling


def benchmark_scaling(
    model_kind: str,
    sizes: Sequence[int],
    config: TrainConfig = TrainConfig(),
    epochs: int = 3,
    settings: ModelSettings = ModelSettings(),
    seed: int = 0,
    repeats: int = 1,
) -> list[tuple[int, float]]:
    """Wall-clock seconds to train a fresh model for ``epochs`` epochs at each size.

    With ``repeats`` > 1 the fastest of the repeated runs is kept, which
    filters scheduler noise out of short timings.
    """
    if list(sizes) != sorted(sizes):
        raise ValueError("sizes must be ascending")
    pool = trajectory_dataset(int(np.ceil(max(sizes) / 201)) + 1, seed=seed)
    rows = []
    for n in sizes:
        data = pool.subset(np.arange(n))
        cfg = replace(config, max_epochs=epochs, seed=seed)
        model = init_model(
            data.inputs, data.targets, model_kind, settings.n_inducing, settings.hidden,
            settings.feature_dim, settings.activation, seed=seed,
        )
        best = np.inf
        for _ in range(max(1, repeats)):
            start = time.perf_counter()
            train_offline(model, data, None, cfg)
            best = min(best, time.perf_counter() - start)
        rows.append((int(n), best))
    return rows


def loglog_slope(rows: Sequence[tuple[int, float]]) -> float:
    n = np.log([r[0] for r in rows])
    t = np.log([r[1] for r in rows])
    return float(np.polyfit(n, t, 1)[0])


# ---------------------------------------------------------------------------
# variance shrinkage on a 1-D task


def sine_task(n: int, seed: int, noise: float = 0.1) -> Dataset:
    rng = np.random.default_rng(seed)
    x = rng.uniform(-3.0, 3.0, size=(n, 1))
    return Dataset(x, np.sin(2.0 * x[:, 0]) + noise * rng.normal(size=n))


def variance_shrinkage(
    sizes: Sequence[int] = (50, 200, 800),
    kind: str = "svdkl",
    seed: int = 0,
    config: TrainConfig | None = None,
    settings: ModelSettings | None = None,
) -> tuple[list[float], list[float]]:
    """Median predictive std at 100 fixed test points after training on nested subsets.

    Returns (median std per size, noise floor σ_n·target_std per size).
    """
    config = config or TrainConfig(learning_rate=1e-2, batch_size=64, max_epochs=400, seed=seed)
    settings = settings or ModelSettings(n_inducing=32, hidden=(32, 32), feature_dim=2)
    full = sine_task(max(sizes), seed)
    valid = sine_task(200, seed + 1000)
    x_test = np.linspace(-2.9, 2.9, 100)[:, None]
    medians, floors = [], []
    for n in sizes:
        train = full.subset(np.arange(n))
        model, _ = fit(kind, train, valid.with_stats_of(train), config, settings)
        _, std = Predictor(model)(x_test)
        medians.append(float(np.median(std[:, 0])))
        floors.append(model.heads[0].noise_std)
    return medians, floors


# ---------------------------------------------------------------------------
# online variable-gain run


def online_reference(
    duration: float, amplitude: float = 0.15, dt: float = 1e-3, mirror: bool = True
) -> TrajectorySpec:
    """2 Hz rhythmic task with period 0.5 s, faster than the warm-start family.

    The mirrored version negates offsets and amplitudes.
    """
    w = 4.0 * np.pi
    spec = TrajectorySpec(
        amplitudes=[[amplitude, 0.2 * amplitude], [1.1 * amplitude, 0.2 * amplitude]],
        frequencies=[[w, 2.0 * w], [w, 2.0 * w]],
        phases=[[0.0, 0.3], [0.5 * np.pi, 0.0]],
        offsets=[0.5, 0.6],
        duration=duration,
        dt=dt,
    )
    return mirrored(spec) if mirror else spec


def default_gains() -> GainConfig:
    return GainConfig(k_min=[40.0, 20.0], k_max=[400.0, 200.0], c=6.0, zeta=1.0,
                      torque_limit=[300.0, 300.0])


def _warm_config() -> TrainConfig:
    return TrainConfig(learning_rate=1e-2, max_epochs=100, warm_start_epochs=60)


def _online_config() -> TrainConfig:
    # slow extractor updates keep single-batch steps from reshaping feature space
    return TrainConfig(learning_rate=1e-2, group_lr={"extractor": 1e-3})


@dataclass
class OnlineSettings:
    n_warm_traj: int = 50
    n_batches: int = 50
    payload: float = 1.0
    # (t_grasp, t_release, mass) rows; overrides ``payload`` when given
    payload_schedule: list | None = None
    amplitude: float = 0.15
    mirror: bool = True
    seed: int = 0
    gains: GainConfig = field(default_factory=default_gains)
    warm: TrainConfig = field(default_factory=_warm_config)
    online: TrainConfig = field(default_factory=_online_config)
    model: ModelSettings = field(default_factory=ModelSettings)


@dataclass
class OnlineResult:
    trace: Trace  # variable gains with online learning
    baseline: Trace  # fixed K_max gains, warm-started model frozen
    batch_ff_rmse: np.ndarray  # (batches, dof)
    batch_size: int
    model: SvdklModel  # final snapshot

    def smoothed_ff_rmse(self, window: int = 5) -> np.ndarray:
        """Mean over joints, moving average over ``window`` batches."""
        per_batch = self.batch_ff_rmse.mean(1)
        return np.convolve(per_batch, np.ones(window) / window, mode="valid")

    def ff_reduction(self, window: int = 5) -> float:
        s = self.smoothed_ff_rmse(window)
        return float(1.0 - s[-1] / s[0])

    def gain_reduction(self, fraction: float = 0.1) -> np.ndarray:
        """Per joint, 1 - mean K_P over the last ``fraction`` / over the first."""
        n = self.trace.kp.shape[0]
        k = max(1, int(round(fraction * n)))
        return 1.0 - self.trace.kp[-k:].mean(0) / self.trace.kp[:k].mean(0)

    def final_position_ratio(self, window: int = 5) -> float:
        sl = slice(-window * self.batch_size, None)
        return float(self.trace.position_rmse(sl).mean() / self.baseline.position_rmse(sl).mean())


def online_experiment(settings: OnlineSettings = OnlineSettings()) -> OnlineResult:
    """Warm start on random rhythmic trajectories, then track a faster mirrored
    task carrying a payload while learning online with variance-scheduled gains.

    The baseline tracks the same task with gains fixed at K_max and the
    warm-started model frozen.
    """
    plant = default_plant()
    warm_data = trajectory_dataset(settings.n_warm_traj, seed=settings.seed, plant=plant)
    ms = settings.model
    model = init_model(
        warm_data.inputs, warm_data.targets, "svdkl", ms.n_inducing, ms.hidden,
        ms.feature_dim, ms.activation, seed=settings.seed,
    )
    model = warm_start(model, warm_data, replace(settings.warm, seed=settings.seed))
    online = replace(settings.online, seed=settings.seed)
    bs = online.online_batch_size
    n_steps = settings.n_batches * bs
    dt = 1e-3
    spec = online_reference((n_steps + 1) * dt, settings.amplitude, dt, settings.mirror)
    schedule = settings.payload_schedule or [(0.0, np.inf, settings.payload)]
    trace = run_closed_loop(plant, spec, model, settings.gains, "variable", online=online,
                            payload_schedule=schedule, n_steps=n_steps)
    baseline = run_closed_loop(plant, spec, model, settings.gains.fixed_high(), "fixed",
                               payload_schedule=schedule, n_steps=n_steps)
    batch_rmse = np.array(
        [trace.feedforward_rmse(slice(b * bs, (b + 1) * bs)) for b in range(settings.n_batches)]
    )
    return OnlineResult(trace, baseline, batch_rmse, bs, trace.final_model)

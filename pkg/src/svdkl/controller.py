"""Computed-torque control with variance-scheduled PD gains.

    τ = K_P (q_d − q) + K_D (q̇_d − q̇) + τ_ff
    K_P = K_min + (1 − z)(K_max − K_min),  z = exp(−C (σ − σ_n) / (σ_f − σ_n))
    K_D = ζ √K_P

σ is the per-joint predictive std of the feedforward model, clamped to
[σ_n, σ_f] so that z stays in [e^{−C}, 1].
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .dynamics import (
    JointState,
    ManipulatorParams,
    PayloadSchedule,
    TrajectorySpec,
    forward_dynamics,
    inverse_dynamics,
    payload_at,
    reference,
    step,
)
from .errors import DimensionMismatch, InvalidVarianceBounds
from .svgp import Predictor, SvdklModel
from .trainer import OnlineLearner, TrainConfig


@dataclass(frozen=True)
class GainConfig:
    k_min: np.ndarray
    k_max: np.ndarray
    c: float = 6.0
    zeta: float = 1.0
    torque_limit: np.ndarray = field(default_factory=lambda: np.array([300.0, 300.0]))
    # max fractional change of K_P per control step; None disables the limiter
    rate_limit: float | None = None

    def __post_init__(self):
        for name in ("k_min", "k_max", "torque_limit"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if np.any(self.k_min <= 0) or np.any(self.k_max < self.k_min):
            raise ValueError("need 0 < k_min <= k_max elementwise")
        if self.c <= 0 or self.zeta <= 0 or np.any(self.torque_limit <= 0):
            raise ValueError("C, zeta and torque limits must be positive")

    def fixed_high(self) -> "GainConfig":
        """Same limits with the gains pinned at K_max."""
        return GainConfig(self.k_max, self.k_max, self.c, self.zeta, self.torque_limit, self.rate_limit)


@dataclass(frozen=True)
class GainState:
    k_p: np.ndarray
    k_d: np.ndarray
    z: np.ndarray


def fixed_gains(cfg: GainConfig) -> GainState:
    return GainState(cfg.k_min.copy(), cfg.zeta * np.sqrt(cfg.k_min), np.ones_like(cfg.k_min))


def variable_gains(sigma_tau, sigma_f, sigma_n, cfg: GainConfig) -> GainState:
    sigma_tau, sigma_f, sigma_n = (np.asarray(a, dtype=np.float64) for a in (sigma_tau, sigma_f, sigma_n))
    if np.any(sigma_n <= 0) or np.any(sigma_f <= sigma_n):
        raise InvalidVarianceBounds("need sigma_f > sigma_n > 0 for every joint")
    s = np.clip(sigma_tau, sigma_n, sigma_f)
    z = np.exp(-cfg.c * (s - sigma_n) / (sigma_f - sigma_n))
    k_p = cfg.k_min + (1.0 - z) * (cfg.k_max - cfg.k_min)
    return GainState(k_p, cfg.zeta * np.sqrt(k_p), z)


def rate_limited(prev: GainState | None, new: GainState, cfg: GainConfig) -> GainState:
    if prev is None or cfg.rate_limit is None:
        return new
    lo, hi = prev.k_p * (1.0 - cfg.rate_limit), prev.k_p * (1.0 + cfg.rate_limit)
    k_p = np.clip(new.k_p, lo, hi)
    return GainState(k_p, cfg.zeta * np.sqrt(k_p), new.z)


def control_torque(
    state: JointState, desired: JointState, gains: GainState, tau_ff, cfg: GainConfig
) -> tuple[np.ndarray, np.ndarray, int]:
    """PD + feedforward, saturated at ±torque_limit.

    Returns (applied torque, feedback torque before saturation, number of
    joints that were clipped).
    """
    tau_ff = np.asarray(tau_ff, dtype=np.float64)
    n = state.q.shape[0]
    if desired.q.shape[0] != n or tau_ff.shape != (n,) or gains.k_p.shape != (n,):
        raise DimensionMismatch("state, reference, gains and feedforward must share dof")
    tau_fb = gains.k_p * (desired.q - state.q) + gains.k_d * (desired.dq - state.dq)
    raw = tau_fb + tau_ff
    tau = np.clip(raw, -cfg.torque_limit, cfg.torque_limit)
    return tau, tau_fb, int(np.count_nonzero(tau != raw))


Feedforward = Union[SvdklModel, str, None]


@dataclass
class Trace:
    """Per-step record of a closed-loop run (arrays indexed by step)."""

    t: np.ndarray
    q_d: np.ndarray
    q: np.ndarray
    dq: np.ndarray
    tau_ff: np.ndarray
    tau_fb: np.ndarray
    sigma: np.ndarray
    kp: np.ndarray
    kd: np.ndarray
    tau_ideal: np.ndarray  # inverse dynamics of the desired state on the true plant
    clip_count: int = 0
    model_versions: list = field(default_factory=list)
    final_model: SvdklModel | None = None  # last published snapshot in online runs

    @property
    def dof(self) -> int:
        return self.q.shape[1]

    def position_rmse(self, sl: slice = slice(None)) -> np.ndarray:
        return np.sqrt(np.mean((self.q_d[sl] - self.q[sl]) ** 2, axis=0))

    def feedforward_rmse(self, sl: slice = slice(None)) -> np.ndarray:
        return np.sqrt(np.mean((self.tau_ff[sl] - self.tau_ideal[sl]) ** 2, axis=0))

    def to_csv(self, path: str | Path) -> None:
        n = self.dof
        cols = ["t"]
        for name in ("q_d", "q", "tau_ff", "tau_fb", "sigma", "kp"):
            cols += [f"{name}{i}" for i in range(1, n + 1)]
        rows = np.hstack(
            [self.t[:, None], self.q_d, self.q, self.tau_ff, self.tau_fb, self.sigma, self.kp]
        )
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in rows:
                w.writerow([f"{v:.17g}" for v in row])


def run_closed_loop(
    plant: ManipulatorParams,
    spec: TrajectorySpec,
    model: Feedforward,
    cfg: GainConfig,
    mode: str = "fixed",
    online: TrainConfig | None = None,
    payload_schedule: PayloadSchedule | None = None,
    n_steps: int | None = None,
) -> Trace:
    """Track ``spec`` on ``plant`` with computed-torque control.

    ``model`` is an SvdklModel, "analytic" (inverse dynamics of the desired
    state on the true plant) or "none"/None (no feedforward). In "variable"
    mode the gains follow the model's per-joint predictive std. With
    ``online`` set, (measured state, applied torque) pairs are streamed to
    the model in batches of ``online.online_batch_size``.
    """
    if mode not in ("fixed", "variable"):
        raise ValueError(f"mode must be 'fixed' or 'variable', got {mode!r}")
    learned = isinstance(model, SvdklModel)
    if learned and model.n_tasks != plant.dof:
        raise DimensionMismatch(f"model has {model.n_tasks} tasks, plant has {plant.dof} joints")
    if mode == "variable" and not learned:
        raise ValueError("variable gains need a learned model with predictive variance")
    if online is not None and not learned:
        raise ValueError("online learning needs a learned model")
    dt, n = spec.dt, plant.dof
    steps = spec.n_steps if n_steps is None else n_steps

    predictor = Predictor(model) if learned else None
    current = model if learned else None
    learner = OnlineLearner(model, online) if online is not None else None
    batch_x, batch_y = [], []

    start = reference(spec, 0.0)
    q, dq = start.q.copy(), start.dq.copy()
    rec = {k: np.zeros((steps, n)) for k in ("q_d", "q", "dq", "tau_ff", "tau_fb", "sigma", "kp", "kd", "tau_ideal")}
    times = np.arange(steps) * dt
    clips, versions, prev_gains = 0, [], None
    for i, t in enumerate(times):
        p_t = plant if payload_schedule is None else plant.with_payload(
            payload_at(payload_schedule, t, plant.payload_mass)
        )
        desired = reference(spec, t)
        # torque is held over [t, t + dt]; the feedforward targets the middle of that interval
        ff_ref = reference(spec, min(t + 0.5 * dt, spec.duration))
        tau_ideal = inverse_dynamics(p_t, ff_ref)
        sigma = np.zeros(n)
        if learned:
            tau_ff, sigma = predictor(ff_ref.as_input())
        elif model == "analytic":
            tau_ff = tau_ideal
        else:
            tau_ff = np.zeros(n)
        if mode == "variable":
            gains = variable_gains(sigma, predictor.signal_std(), predictor.noise_floor(), cfg)
            gains = rate_limited(prev_gains, gains, cfg)
        else:
            gains = fixed_gains(cfg)
        prev_gains = gains
        state = JointState(q, dq, np.zeros(n))
        tau, tau_fb, clipped = control_torque(state, desired, gains, tau_ff, cfg)
        clips += clipped

        for key, val in (("q_d", desired.q), ("q", q), ("dq", dq), ("tau_ff", tau_ff),
                         ("tau_fb", tau_fb), ("sigma", sigma), ("kp", gains.k_p),
                         ("kd", gains.k_d), ("tau_ideal", tau_ideal)):
            rec[key][i] = val

        if learner is not None:
            ddq = forward_dynamics(p_t, q, dq, tau)
            batch_x.append(np.concatenate([q, dq, ddq]))
            batch_y.append(tau)
            if len(batch_x) == online.online_batch_size:
                new_model = learner.step(np.array(batch_x), np.array(batch_y))
                predictor = Predictor(new_model)
                current = new_model
                versions.append(new_model.version)
                batch_x, batch_y = [], []

        q, dq = step(p_t, q, dq, tau, dt)
    return Trace(times, clip_count=clips, model_versions=versions, final_model=current, **rec)

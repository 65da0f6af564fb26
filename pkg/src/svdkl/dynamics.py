"""Planar serial-chain manipulator: τ = M(q) q̈ + h(q, q̇).

Every body (link centres of mass and the tip payload) is a point whose
position is a weighted sum of unit vectors along the absolute link angles
θ_s = q_1 + ... + q_s. Its Jacobian and the derivative of that Jacobian
follow from reverse cumulative sums, which gives M(q), ∂M/∂q and the
Christoffel-form Coriolis terms in closed form for any number of links.
Gravity acts along −y.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, OutOfRange
from .numeric import cholesky_psd, tri_solve


@dataclass(frozen=True)
class ManipulatorParams:
    lengths: np.ndarray  # m
    com: np.ndarray  # distance of each link's COM from its proximal joint, m
    masses: np.ndarray  # kg
    inertias: np.ndarray  # about the COM, kg m^2
    viscous: np.ndarray  # N m s / rad
    coulomb: np.ndarray  # N m
    gravity: float = 9.81
    payload_mass: float = 0.0

    def __post_init__(self):
        for name in ("lengths", "com", "masses", "inertias", "viscous", "coulomb"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = self.lengths.shape[0]
        if any(getattr(self, k).shape != (n,) for k in ("com", "masses", "inertias", "viscous", "coulomb")):
            raise DimensionMismatch("per-link parameter arrays must all have length dof")
        if np.any(self.lengths <= 0) or np.any(self.masses <= 0):
            raise ValueError("link lengths and masses must be positive")
        if np.any(self.com < 0) or np.any(self.com > self.lengths):
            raise ValueError("COM offsets must lie within their link")
        if np.any(self.inertias < 0) or np.any(self.viscous < 0) or np.any(self.coulomb < 0):
            raise ValueError("inertias and friction coefficients must be non-negative")
        if self.payload_mass < 0:
            raise ValueError("payload mass must be non-negative")

    @property
    def dof(self) -> int:
        return self.lengths.shape[0]

    @classmethod
    def two_link(
        cls,
        lengths=(1.0, 1.0),
        masses=(1.0, 1.0),
        com=None,
        inertias=None,
        viscous=(0.0, 0.0),
        coulomb=(0.0, 0.0),
        gravity: float = 9.81,
        payload_mass: float = 0.0,
    ) -> "ManipulatorParams":
        """Two uniform rods by default (COM at mid-length, I = m l² / 12)."""
        lengths = np.asarray(lengths, dtype=np.float64)
        masses = np.asarray(masses, dtype=np.float64)
        com = 0.5 * lengths if com is None else com
        inertias = masses * lengths**2 / 12.0 if inertias is None else inertias
        return cls(lengths, com, masses, inertias, viscous, coulomb, gravity, payload_mass)

    def with_payload(self, mass: float) -> "ManipulatorParams":
        return replace(self, payload_mass=float(mass))


def default_plant(payload_mass: float = 0.0) -> ManipulatorParams:
    """The desk-scale reference arm used by the experiments."""
    return ManipulatorParams.two_link(
        lengths=(1.0, 0.8),
        masses=(2.0, 1.2),
        viscous=(0.5, 0.3),
        coulomb=(0.8, 0.5),
        payload_mass=payload_mass,
    )


@dataclass(frozen=True)
class JointState:
    q: np.ndarray
    dq: np.ndarray
    ddq: np.ndarray

    def __post_init__(self):
        for name in ("q", "dq", "ddq"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if not (self.q.shape == self.dq.shape == self.ddq.shape) or self.q.ndim != 1:
            raise DimensionMismatch("q, dq and ddq must be vectors of equal length")

    def as_input(self) -> np.ndarray:
        """Regression input row [q, dq, ddq]."""
        return np.concatenate([self.q, self.dq, self.ddq])


def _check_q(p: ManipulatorParams, *vecs) -> list[np.ndarray]:
    out = []
    for v in vecs:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (p.dof,):
            raise DimensionMismatch(f"expected a vector of length {p.dof}, got shape {v.shape}")
        out.append(v)
    return out


def _bodies(p: ManipulatorParams) -> tuple[np.ndarray, np.ndarray]:
    """Segment weights (bodies × links) and masses of every point mass."""
    cached = p.__dict__.get("_bodies_cache")
    if cached is not None:
        return cached
    n = p.dof
    w = np.zeros((n + 1, n))
    for i in range(n):
        w[i, :i] = p.lengths[:i]
        w[i, i] = p.com[i]
    w[n] = p.lengths
    out = (w, np.append(p.masses, p.payload_mass))
    object.__setattr__(p, "_bodies_cache", out)
    return out


def _kinematics(p: ManipulatorParams, q: np.ndarray):
    theta = np.cumsum(q)
    w, m = _bodies(p)
    # reverse cumulative sums over segments s >= j
    cx = np.cumsum((w * np.cos(theta))[:, ::-1], axis=1)[:, ::-1]
    cy = np.cumsum((w * np.sin(theta))[:, ::-1], axis=1)[:, ::-1]
    return cx, cy, m


def _terms(p: ManipulatorParams, q: np.ndarray, derivs: bool = True):
    """M(q), ∂M/∂q (or None) and the gravity torque from one kinematics pass."""
    cx, cy, m = _kinematics(p, q)
    n = p.dof
    jx, jy = -cy, cx
    mm = (jx.T * m) @ jx + (jy.T * m) @ jy
    jw = np.tril(np.ones((n, n)))  # row i: which joints rotate link i
    mm += (jw.T * p.inertias) @ jw
    mm = 0.5 * (mm + mm.T)
    grav = p.gravity * (m @ cx)
    if not derivs:
        return mm, None, grav
    idx = np.maximum.outer(np.arange(n), np.arange(n))  # max(j, k)
    d = np.empty((n, n, n))
    for k in range(n):
        djx = -cx[:, idx[:, k]]  # bodies × j
        djy = -cy[:, idx[:, k]]
        a = (djx.T * m) @ jx + (djy.T * m) @ jy
        d[k] = a + a.T
    return mm, d, grav


def mass_matrix(p: ManipulatorParams, q) -> np.ndarray:
    (q,) = _check_q(p, q)
    return _terms(p, q, derivs=False)[0]


def mass_matrix_derivs(p: ManipulatorParams, q) -> np.ndarray:
    """∂M/∂q_k stacked as D[k] (shape dof × dof × dof)."""
    (q,) = _check_q(p, q)
    return _terms(p, q)[1]


def coriolis_matrix(p: ManipulatorParams, q, dq) -> np.ndarray:
    """Christoffel-form C(q, q̇) with Coriolis/centripetal torque C q̇."""
    q, dq = _check_q(p, q, dq)
    d = mass_matrix_derivs(p, q)
    # C_ij = ½ Σ_k (∂_k M_ij + ∂_j M_ik − ∂_i M_jk) q̇_k
    t1 = np.einsum("kij,k->ij", d, dq)
    t2 = np.einsum("jik,k->ij", d, dq)
    t3 = np.einsum("ijk,k->ij", d, dq)
    return 0.5 * (t1 + t2 - t3)


def gravity_torque(p: ManipulatorParams, q) -> np.ndarray:
    (q,) = _check_q(p, q)
    return _terms(p, q, derivs=False)[2]


def potential_energy(p: ManipulatorParams, q) -> float:
    (q,) = _check_q(p, q)
    theta = np.cumsum(q)
    w, m = _bodies(p)
    return float(p.gravity * m @ (w @ np.sin(theta)))


def kinetic_energy(p: ManipulatorParams, q, dq) -> float:
    dq = np.asarray(dq, dtype=np.float64)
    return float(0.5 * dq @ mass_matrix(p, q) @ dq)


def friction_torque(p: ManipulatorParams, dq) -> np.ndarray:
    return p.viscous * dq + p.coulomb * np.sign(dq)


def _bias(p: ManipulatorParams, q: np.ndarray, dq: np.ndarray, d: np.ndarray, grav: np.ndarray) -> np.ndarray:
    mdot = np.tensordot(dq, d, axes=1)
    coriolis = mdot @ dq - 0.5 * (d @ dq) @ dq
    return coriolis + grav + friction_torque(p, dq)


def bias_forces(p: ManipulatorParams, q, dq) -> np.ndarray:
    """h(q, q̇): Coriolis/centripetal + gravity + viscous + Coulomb friction."""
    q, dq = _check_q(p, q, dq)
    _, d, grav = _terms(p, q)
    return _bias(p, q, dq, d, grav)


def inverse_dynamics(p: ManipulatorParams, state: JointState) -> np.ndarray:
    q, dq, ddq = _check_q(p, state.q, state.dq, state.ddq)
    mm, d, grav = _terms(p, q)
    return mm @ ddq + _bias(p, q, dq, d, grav)


def forward_dynamics(p: ManipulatorParams, q, dq, tau) -> np.ndarray:
    q, dq, tau = _check_q(p, q, dq, tau)
    mm, d, grav = _terms(p, q)
    chol = cholesky_psd(mm, (0.0,))
    rhs = tau - _bias(p, q, dq, d, grav)
    return tri_solve(chol, tri_solve(chol, rhs, "lower"), "lower-transpose")


def step(p: ManipulatorParams, q, dq, tau, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """One classical RK4 step with the torque held constant."""
    if not 0.0 < dt <= 0.01:
        raise ValueError(f"dt must lie in (0, 0.01], got {dt}")
    q, dq, tau = _check_q(p, q, dq, tau)

    def f(qq, vv):
        return vv, forward_dynamics(p, qq, vv, tau)

    k1q, k1v = f(q, dq)
    k2q, k2v = f(q + 0.5 * dt * k1q, dq + 0.5 * dt * k1v)
    k3q, k3v = f(q + 0.5 * dt * k2q, dq + 0.5 * dt * k2v)
    k4q, k4v = f(q + dt * k3q, dq + dt * k3v)
    q_next = q + dt / 6.0 * (k1q + 2 * k2q + 2 * k3q + k4q)
    dq_next = dq + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
    return q_next, dq_next


# ---------------------------------------------------------------------------
# reference trajectories


@dataclass(frozen=True)
class TrajectorySpec:
    """Per-joint sums of sinusoids: q_d = offset + Σ_k a_k sin(ω_k t + φ_k)."""

    amplitudes: np.ndarray  # (dof, K) rad
    frequencies: np.ndarray  # (dof, K) rad/s
    phases: np.ndarray  # (dof, K) rad
    offsets: np.ndarray  # (dof,) rad
    duration: float
    dt: float = 1e-3

    def __post_init__(self):
        for name in ("amplitudes", "frequencies", "phases"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=np.float64)))
        object.__setattr__(self, "offsets", np.asarray(self.offsets, dtype=np.float64))
        if not (self.amplitudes.shape == self.frequencies.shape == self.phases.shape):
            raise DimensionMismatch("amplitudes, frequencies and phases must share a shape")
        if self.offsets.shape != (self.amplitudes.shape[0],):
            raise DimensionMismatch("one offset per joint required")
        if self.dt <= 0 or self.duration < self.dt:
            raise ValueError("need dt > 0 and duration >= dt")
        if np.any(np.abs(self.offsets) + np.abs(self.amplitudes).sum(1) > np.pi):
            raise ValueError("trajectory leaves the joint range [-pi, pi]")

    @property
    def dof(self) -> int:
        return self.offsets.shape[0]

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))


def reference(spec: TrajectorySpec, t: float) -> JointState:
    if t < -1e-12 or t > spec.duration + 1e-9:
        raise OutOfRange(f"t={t} outside [0, {spec.duration}]")
    arg = spec.frequencies * t + spec.phases
    s, c = np.sin(arg), np.cos(arg)
    a, w = spec.amplitudes, spec.frequencies
    return JointState(
        spec.offsets + (a * s).sum(1),
        (a * w * c).sum(1),
        -(a * w * w * s).sum(1),
    )


def reference_samples(spec: TrajectorySpec, times) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized reference: q, dq, ddq each shaped (len(times), dof)."""
    t = np.asarray(times, dtype=np.float64)
    arg = spec.frequencies[None] * t[:, None, None] + spec.phases[None]
    a, w = spec.amplitudes[None], spec.frequencies[None]
    s, c = np.sin(arg), np.cos(arg)
    return spec.offsets + (a * s).sum(2), (a * w * c).sum(2), -(a * w * w * s).sum(2)


def mirrored(spec: TrajectorySpec) -> TrajectorySpec:
    """The same motion reflected through the origin of joint space."""
    return replace(spec, amplitudes=-spec.amplitudes, offsets=-spec.offsets)


def random_trajectory(
    rng: np.random.Generator,
    dof: int = 2,
    duration: float = 2.0,
    dt: float = 1e-3,
    n_harmonics: int = 2,
    base_freq: tuple[float, float] = (0.3, 1.0),
    amplitude: tuple[float, float] = (0.1, 0.6),
    offset: tuple[float, float] = (0.2, 0.9),
) -> TrajectorySpec:
    """Rhythmic reference with random harmonic content (frequencies in Hz)."""
    f0 = rng.uniform(*base_freq, size=(dof, 1))
    harmonics = np.arange(1, n_harmonics + 1)[None, :]
    amps = rng.uniform(*amplitude, size=(dof, n_harmonics)) / harmonics
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(dof, n_harmonics))
    offsets = rng.uniform(*offset, size=dof)
    return TrajectorySpec(amps, 2.0 * np.pi * f0 * harmonics, phases, offsets, duration, dt)


PayloadSchedule = Sequence[tuple[float, float, float]]


def payload_at(schedule: PayloadSchedule | None, t: float, default: float = 0.0) -> float:
    """Mass held at time t; schedule rows are (t_grasp, t_release, mass)."""
    for start, end, mass in schedule or ():
        if start <= t < end:
            return float(mass)
    return float(default)


def sample_dataset(
    plant: ManipulatorParams,
    spec: TrajectorySpec,
    sample_dt: float = 0.01,
    torque_noise: float = 0.0,
    rng: np.random.Generator | None = None,
    payload_schedule: PayloadSchedule | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-dynamics samples along a reference: inputs (N, 3n), torques (N, n)."""
    times = np.arange(0.0, spec.duration + 1e-12, sample_dt)
    q, dq, ddq = reference_samples(spec, times)
    tau = np.empty_like(q)
    for i, t in enumerate(times):
        p = plant if payload_schedule is None else plant.with_payload(
            payload_at(payload_schedule, t, plant.payload_mass)
        )
        tau[i] = inverse_dynamics(p, JointState(q[i], dq[i], ddq[i]))
    if torque_noise > 0.0:
        rng = rng if rng is not None else np.random.default_rng(0)
        tau = tau + rng.normal(0.0, torque_noise, size=tau.shape)
    return np.hstack([q, dq, ddq]), tau

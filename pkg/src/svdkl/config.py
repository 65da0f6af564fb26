"""Flat ``key = value`` configuration files and builders for the objects they describe.

Lines starting with ``#`` are comments, as is anything after `` #`` on a
line. Vectors are whitespace or comma separated; matrices separate rows
with ``;``. Example plant file::

    lengths = 1.0, 0.8
    masses = 2.0, 1.2
    viscous = 0.5 0.3
"""

from __future__ import annotations

import configparser
from dataclasses import fields
from pathlib import Path

import numpy as np

from .controller import GainConfig
from .dynamics import ManipulatorParams, PayloadSchedule, TrajectorySpec, default_plant, random_trajectory
from .errors import DataError
from .trainer import TrainConfig

_SECTION = "config"


def parse_config(text: str) -> dict[str, str]:
    parser = configparser.ConfigParser(
        delimiters=("=",), comment_prefixes=("#",), inline_comment_prefixes=(" #", "\t#"),
        interpolation=None, empty_lines_in_values=False,
    )
    parser.optionxform = str  # keep key case
    try:
        parser.read_string(f"[{_SECTION}]\n" + text)
    except configparser.Error as exc:
        raise DataError(f"malformed configuration: {exc}") from None
    return dict(parser[_SECTION])


def load_config(path: str | Path) -> dict[str, str]:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def _vector(value: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in value.replace(",", " ").split()], dtype=np.float64)
    except ValueError:
        raise DataError(f"cannot parse {value!r} as a list of numbers") from None


def _matrix(value: str) -> np.ndarray:
    rows = [_vector(r) for r in value.split(";") if r.strip()]
    if len({r.shape for r in rows}) != 1:
        raise DataError(f"ragged matrix {value!r}")
    return np.vstack(rows)


def _float(value: str, key: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise DataError(f"{key}: cannot parse {value!r} as a number") from None


def _check_keys(cfg: dict, allowed, what: str) -> None:
    unknown = sorted(set(cfg) - set(allowed))
    if unknown:
        raise DataError(f"unknown {what} keys: {', '.join(unknown)}")


_PLANT_VECTORS = ("lengths", "com", "masses", "inertias", "viscous", "coulomb")


def plant_from_config(cfg: dict[str, str]) -> ManipulatorParams:
    """Missing keys fall back to the reference arm; com and inertias default to uniform rods."""
    _check_keys(cfg, _PLANT_VECTORS + ("gravity", "payload_mass"), "plant")
    base = default_plant()
    lengths = _vector(cfg["lengths"]) if "lengths" in cfg else base.lengths
    masses = _vector(cfg["masses"]) if "masses" in cfg else base.masses
    n = lengths.shape[0]
    if masses.shape != (n,):
        raise DataError(f"invalid plant: {n} lengths but {masses.shape[0]} masses")
    defaults = {
        "com": 0.5 * lengths,
        "inertias": masses * lengths**2 / 12.0,
        "viscous": base.viscous if n == base.dof else np.zeros(n),
        "coulomb": base.coulomb if n == base.dof else np.zeros(n),
    }
    vec = {k: _vector(cfg[k]) if k in cfg else defaults[k] for k in defaults}
    try:
        return ManipulatorParams(
            lengths, vec["com"], masses, vec["inertias"], vec["viscous"], vec["coulomb"],
            _float(cfg.get("gravity", "9.81"), "gravity"),
            _float(cfg.get("payload_mass", "0"), "payload_mass"),
        )
    except ValueError as exc:
        raise DataError(f"invalid plant: {exc}") from None


def trajectory_from_config(cfg: dict[str, str], dof: int = 2) -> TrajectorySpec:
    """Either explicit harmonics (amplitudes, frequencies in Hz, phases,
    offsets) or ``random = <seed>`` for a seeded random rhythmic reference."""
    _check_keys(cfg, ("random", "amplitudes", "frequencies", "phases", "offsets",
                      "duration", "dt", "mirror"), "trajectory")
    duration = _float(cfg.get("duration", "10.0"), "duration")
    dt = _float(cfg.get("dt", "1e-3"), "dt")
    try:
        if "random" in cfg:
            spec = random_trajectory(np.random.default_rng(int(cfg["random"])), dof, duration, dt)
        else:
            amps = _matrix(cfg["amplitudes"])
            freqs = 2.0 * np.pi * _matrix(cfg["frequencies"])
            phases = _matrix(cfg["phases"]) if "phases" in cfg else np.zeros_like(amps)
            offsets = _vector(cfg["offsets"]) if "offsets" in cfg else np.zeros(amps.shape[0])
            spec = TrajectorySpec(amps, freqs, phases, offsets, duration, dt)
    except KeyError as exc:
        raise DataError(f"trajectory needs {exc.args[0]!r} or 'random'") from None
    except ValueError as exc:
        raise DataError(f"invalid trajectory: {exc}") from None
    if cfg.get("mirror", "false").strip().lower() in ("1", "true", "yes"):
        from .dynamics import mirrored

        spec = mirrored(spec)
    return spec


def gains_from_config(cfg: dict[str, str]) -> GainConfig:
    _check_keys(cfg, ("k_min", "k_max", "c", "zeta", "torque_limit", "rate_limit"), "gain")
    try:
        return GainConfig(
            _vector(cfg["k_min"]), _vector(cfg["k_max"]),
            _float(cfg.get("c", "6"), "c"), _float(cfg.get("zeta", "1"), "zeta"),
            _vector(cfg.get("torque_limit", "300 300")),
            _float(cfg["rate_limit"], "rate_limit") if "rate_limit" in cfg else None,
        )
    except KeyError as exc:
        raise DataError(f"gain config needs {exc.args[0]!r}") from None
    except ValueError as exc:
        raise DataError(f"invalid gains: {exc}") from None


def train_config_from(cfg: dict[str, str], base: TrainConfig | None = None) -> TrainConfig:
    """Scalar TrainConfig fields by name; ``lr.<group>`` sets a group rate and
    ``freeze`` / ``online_freeze`` take comma-separated group names."""
    base = base or TrainConfig()
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    kw = {}
    group_lr = dict(base.group_lr)
    for key, value in cfg.items():
        if key.startswith("lr."):
            group_lr[key[3:]] = _float(value, key)
        elif key in ("freeze", "online_freeze"):
            kw[key] = tuple(v.strip() for v in value.split(",") if v.strip())
        elif key in kinds and key != "group_lr":
            cur = getattr(base, key)
            if isinstance(cur, bool):
                kw[key] = value.strip().lower() in ("1", "true", "yes")
            elif isinstance(cur, int):
                try:
                    kw[key] = int(value)
                except ValueError:
                    raise DataError(f"{key}: expected an integer, got {value!r}") from None
            else:
                kw[key] = _float(value, key)
        else:
            raise DataError(f"unknown training key {key!r}")
    values = {f.name: getattr(base, f.name) for f in fields(TrainConfig)}
    values.update(kw, group_lr=group_lr)
    try:
        return TrainConfig(**values)
    except ValueError as exc:
        raise DataError(f"invalid training config: {exc}") from None


def parse_payload_schedule(text: str) -> PayloadSchedule:
    """``start:end:mass`` rows separated by commas; ``inf`` is accepted as an end time."""
    rows = []
    for part in text.split(","):
        if not part.strip():
            continue
        bits = part.split(":")
        if len(bits) != 3:
            raise DataError(f"payload entry {part!r} is not start:end:mass")
        start, end, mass = (_float(b, "payload schedule") for b in bits)
        if end <= start or mass < 0:
            raise DataError(f"payload entry {part!r} needs end > start and mass >= 0")
        rows.append((start, end, mass))
    return rows

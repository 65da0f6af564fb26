"""Datasets: CSV interchange, seeded splits, normalization and metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyDataset, HeaderMismatch, NonFiniteValue, ParseError


def csv_header(dof: int) -> list[str]:
    cols = []
    for prefix in ("q", "dq", "ddq", "tau"):
        cols += [f"{prefix}{i}" for i in range(1, dof + 1)]
    return cols


@dataclass
class Dataset:
    """Inputs [q, dq, ddq] (N, 3n) and joint torques (N, n).

    Synthetic regression tasks may use any input width; the CSV format
    enforces the 3n layout.

    Normalization statistics default to the dataset's own; ``split`` swaps
    in the training split's statistics.
    """

    inputs: np.ndarray
    targets: np.ndarray
    input_mean: np.ndarray | None = None
    input_std: np.ndarray | None = None
    target_mean: np.ndarray | None = None
    target_std: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.targets.ndim == 1:
            self.targets = self.targets[:, None]
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.targets.shape[0]:
            raise DimensionMismatch(f"inputs {self.inputs.shape} vs targets {self.targets.shape}")
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.targets))):
            raise NonFiniteValue("dataset contains non-finite values")
        if self.input_mean is None and len(self) > 0:
            self.input_mean, self.input_std = _stats(self.inputs)
            self.target_mean, self.target_std = _stats(self.targets)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dof(self) -> int:
        return self.targets.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(
            self.inputs[idx], self.targets[idx],
            self.input_mean, self.input_std, self.target_mean, self.target_std,
        )

    def with_stats_of(self, other: "Dataset") -> "Dataset":
        return Dataset(
            self.inputs, self.targets,
            other.input_mean, other.input_std, other.target_mean, other.target_std,
        )

    @staticmethod
    def concat(parts: Sequence["Dataset"]) -> "Dataset":
        return Dataset(
            np.vstack([p.inputs for p in parts]), np.vstack([p.targets for p in parts])
        )

    def require_nonempty(self) -> None:
        if len(self) == 0:
            raise EmptyDataset("dataset has no rows")


def _stats(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    std = a.std(0)
    return a.mean(0), np.where(std > 0.0, std, 1.0)


def save_csv(path: str | Path, data: Dataset) -> None:
    """Write the dataset with 17 significant digits (lossless for float64)."""
    if data.inputs.shape[1] != 3 * data.dof:
        raise DimensionMismatch("CSV export needs inputs laid out as [q, dq, ddq]")
    rows = np.hstack([data.inputs, data.targets])
    with open(path, "w", newline="") as fh:
        fh.write(",".join(csv_header(data.dof)) + "\n")
        for row in rows:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def load_csv(path: str | Path, dof: int) -> Dataset:
    expected = csv_header(dof)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise HeaderMismatch(f"{path} is empty") from None
        if header != expected:
            raise HeaderMismatch(
                f"expected {len(expected)} columns {expected[0]}..{expected[-1]} for dof={dof}, "
                f"got {len(header)} columns"
            )
        values = []
        for r, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected):
                raise ParseError(f"expected {len(expected)} fields, found {len(row)}", row=r)
            parsed = []
            for c, cell in enumerate(row, start=1):
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(f"cannot parse {cell!r} as a number", row=r, column=c) from None
                if not np.isfinite(v):
                    raise NonFiniteValue(f"non-finite value at row {r}, column {c}")
                parsed.append(v)
            values.append(parsed)
    arr = np.array(values, dtype=np.float64).reshape(-1, 4 * dof)
    return Dataset(arr[:, : 3 * dof], arr[:, 3 * dof :])


def split(
    data: Dataset, fractions: Sequence[float] = (0.66, 0.18, 0.16), seed: int = 0
) -> tuple[Dataset, Dataset, Dataset]:
    """Seeded shuffle then contiguous train/valid/test split.

    All three parts carry the statistics of the training part.
    """
    data.require_nonempty()
    fr = [float(f) for f in fractions]
    if len(fr) != 3 or any(f < 0 for f in fr) or fr[0] <= 0 or sum(fr) > 1.0 + 1e-12:
        raise ValueError(f"invalid split fractions {fractions}")
    n = len(data)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fr[0] * n))
    n_valid = int(round(fr[1] * n))
    n_test = min(int(round(fr[2] * n)), n - n_train - n_valid)
    if n_train == 0:
        raise EmptyDataset("training split is empty")
    train = Dataset(data.inputs[perm[:n_train]], data.targets[perm[:n_train]])
    valid = data.subset(perm[n_train : n_train + n_valid]).with_stats_of(train)
    test = data.subset(perm[n_train + n_valid : n_train + n_valid + n_test]).with_stats_of(train)
    return train, valid, test


@dataclass
class MetricsReport:
    per_task_rmse: np.ndarray
    per_task_mean_std: np.ndarray
    n_samples: int
    seconds: float = 0.0
    config: dict = field(default_factory=dict)

    @property
    def mean_rmse(self) -> float:
        return float(np.mean(self.per_task_rmse))

    def to_text(self, include_timing: bool = False) -> str:
        """Human-readable report. Timing is opt-in so reports stay reproducible."""
        lines = [f"n_samples: {self.n_samples}", f"mean_rmse: {self.mean_rmse:.17g}"]
        lines.append("task,rmse,mean_std")
        for i, (r, s) in enumerate(zip(self.per_task_rmse, self.per_task_mean_std), start=1):
            lines.append(f"{i},{r:.17g},{s:.17g}")
        if include_timing:
            lines.append(f"seconds: {self.seconds:.6f}")
        for k in sorted(self.config):
            lines.append(f"config.{k}: {self.config[k]}")
        return "\n".join(lines) + "\n"


def evaluate(model, test: Dataset, config: dict | None = None) -> MetricsReport:
    """Per-task RMSE of predictive means against targets, in torque units.

    ``model`` is an SvdklModel, a Predictor, or any callable mapping an
    (N, 3n) input array to means or (means, stds).
    """
    from .svgp import Predictor, SvdklModel

    if len(test) == 0:
        raise EmptyDataset("cannot evaluate on an empty test set")
    predictor: Callable = Predictor(model) if isinstance(model, SvdklModel) else model
    if isinstance(model, SvdklModel) and model.n_tasks != test.dof:
        raise DimensionMismatch(f"model has {model.n_tasks} tasks, data has dof {test.dof}")
    out = predictor(test.inputs)
    means, stds = out if isinstance(out, tuple) else (out, np.zeros_like(out))
    means = np.asarray(means).reshape(test.targets.shape)
    stds = np.asarray(stds).reshape(test.targets.shape)
    rmse = np.sqrt(np.mean((means - test.targets) ** 2, axis=0))
    return MetricsReport(rmse, stds.mean(0), len(test), config=dict(config or {}))

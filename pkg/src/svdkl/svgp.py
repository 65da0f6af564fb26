"""Sparse variational GP heads on top of a shared feature extractor.

Each output task owns an independent head (its own kernel, noise and
inducing points) while all heads share one MLP feature extractor. The
variational posterior is whitened: u = L_Z v with q(v) = N(mu, Lq Lqᵀ),
so the prior corresponds to mu = 0, Lq = I and the KL term vanishes there.

Gradients are written out by hand and pulled back through the Cholesky
factor of K_uu, the kernel, and the extractor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg as sla

from .errors import DimensionMismatch, VersionMismatch
from .kernel import RbfParams, kernel_matrix, rbf_backward
from .mlp import MlpParams, mlp_backward, mlp_forward, mlp_init
from .numeric import DEFAULT_JITTER_LADDER, cholesky_backward, cholesky_psd, tri_solve

LOG_2PI = float(np.log(2.0 * np.pi))
FORMAT_NAME = "svdkl-model"
FORMAT_VERSION = 1


@dataclass
class VariationalState:
    inducing_inputs: np.ndarray  # (m, d_feat)
    var_mean: np.ndarray  # (m,)
    # strict lower triangle holds the off-diagonal of Lq, the diagonal holds log(diag Lq)
    var_chol_raw: np.ndarray

    @classmethod
    def prior(cls, inducing_inputs: np.ndarray) -> "VariationalState":
        z = np.array(inducing_inputs, dtype=np.float64)
        m = z.shape[0]
        return cls(z, np.zeros(m), np.zeros((m, m)))

    @property
    def num_inducing(self) -> int:
        return self.inducing_inputs.shape[0]

    @property
    def var_chol(self) -> np.ndarray:
        raw = self.var_chol_raw
        lq = np.tril(raw, -1)
        lq[np.diag_indices_from(lq)] = np.exp(np.diag(raw))
        return lq

    def set_var_chol(self, lq: np.ndarray) -> None:
        lq = np.tril(np.asarray(lq, dtype=np.float64))
        raw = np.tril(lq, -1)
        raw[np.diag_indices_from(raw)] = np.log(np.diag(lq))
        self.var_chol_raw = raw

    def copy(self) -> "VariationalState":
        return VariationalState(
            self.inducing_inputs.copy(), self.var_mean.copy(), self.var_chol_raw.copy()
        )


@dataclass
class TaskHead:
    kernel: RbfParams
    variational: VariationalState
    target_mean: float = 0.0
    target_std: float = 1.0

    def copy(self) -> "TaskHead":
        return TaskHead(
            self.kernel.copy(), self.variational.copy(), self.target_mean, self.target_std
        )

    @property
    def signal_std(self) -> float:
        """σ_f in target units."""
        return float(np.exp(self.kernel.log_signal_std)) * self.target_std

    @property
    def noise_std(self) -> float:
        """σ_n in target units."""
        return float(np.exp(self.kernel.log_noise_std)) * self.target_std


@dataclass
class SvdklModel:
    """Shared extractor (None for a plain SVGP) plus one head per joint."""

    extractor: MlpParams | None
    heads: list[TaskHead]
    input_mean: np.ndarray
    input_std: np.ndarray
    online_ready: bool = False
    n_seen: int = 0
    version: int = 0

    @property
    def kind(self) -> str:
        return "svgp" if self.extractor is None else "svdkl"

    @property
    def n_tasks(self) -> int:
        return len(self.heads)

    @property
    def input_dim(self) -> int:
        return self.input_mean.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.input_dim if self.extractor is None else self.extractor.output_dim

    def copy(self) -> "SvdklModel":
        return SvdklModel(
            None if self.extractor is None else self.extractor.copy(),
            [h.copy() for h in self.heads],
            self.input_mean.copy(),
            self.input_std.copy(),
            self.online_ready,
            self.n_seen,
            self.version,
        )

    def normalize_inputs(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_dim:
            raise DimensionMismatch(f"expected input width {self.input_dim}, got {x.shape}")
        return (x - self.input_mean) / self.input_std

    def normalize_targets(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        mean = np.array([h.target_mean for h in self.heads])
        std = np.array([h.target_std for h in self.heads])
        return (y - mean) / std

    def features(self, xn: np.ndarray):
        """Feature map on normalized inputs; returns (features, tape or None)."""
        if self.extractor is None:
            return xn, None
        return mlp_forward(self.extractor, xn)


@dataclass(frozen=True)
class PredictiveDist:
    mean: float
    std: float


# ---------------------------------------------------------------------------
# construction


def _safe_std(a: np.ndarray, axis=0) -> np.ndarray:
    s = np.std(a, axis=axis)
    return np.where(s > 0.0, s, 1.0)


def init_model(
    inputs,
    targets,
    kind: str = "svdkl",
    n_inducing: int = 128,
    hidden: Sequence[int] = (64, 64),
    feature_dim: int = 8,
    activation: str = "relu",
    seed: int = 0,
) -> SvdklModel:
    """Build an untrained model whose statistics come from (inputs, targets).

    Inducing inputs start at the features of a seeded random subset of the
    training rows; variational parameters start at the whitened prior.
    """
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    y = np.asarray(targets, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if x.shape[0] != y.shape[0] or x.shape[0] == 0:
        raise DimensionMismatch(f"inputs {x.shape} and targets {y.shape} do not pair up")
    if kind not in ("svdkl", "svgp"):
        raise ValueError(f"unknown model kind {kind!r}")
    rng = np.random.default_rng(seed)
    extractor = None
    if kind == "svdkl":
        widths = [x.shape[1], *hidden, feature_dim]
        extractor = mlp_init(widths, activation, seed=int(rng.integers(2**31)))
    model = SvdklModel(extractor, [], x.mean(0), _safe_std(x))
    feats, _ = model.features(model.normalize_inputs(x))
    m = min(int(n_inducing), x.shape[0])
    y_mean, y_std = y.mean(0), _safe_std(y)
    for t in range(y.shape[1]):
        idx = rng.choice(x.shape[0], size=m, replace=False)
        model.heads.append(
            TaskHead(
                RbfParams.default(model.feature_dim),
                VariationalState.prior(feats[idx]),
                float(y_mean[t]),
                float(y_std[t]),
            )
        )
    return model


# ---------------------------------------------------------------------------
# ELBO


def kl_whitened(var_mean: np.ndarray, var_chol: np.ndarray) -> float:
    """KL(N(mu, Lq Lqᵀ) || N(0, I))."""
    m = var_mean.shape[0]
    return 0.5 * float(
        np.sum(var_chol**2) + var_mean @ var_mean - m - 2.0 * np.sum(np.log(np.diag(var_chol)))
    )


def head_elbo(
    head: TaskHead,
    feats: np.ndarray,
    y: np.ndarray,
    total_n: int,
    jitter_ladder=DEFAULT_JITTER_LADDER,
) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    """Minibatch ELBO of one head on features ``feats`` and normalized ``y``.

    Returns (elbo, grads keyed like ``head_params``, d elbo / d feats).
    """
    kp, vs = head.kernel, head.variational
    z, mu, lq = vs.inducing_inputs, vs.var_mean, vs.var_chol
    b = feats.shape[0]
    if b == 0 or y.shape[0] != b:
        raise DimensionMismatch(f"batch of {b} features with {y.shape[0]} targets")
    if feats.shape[1] != z.shape[1]:
        raise DimensionMismatch(f"feature width {feats.shape[1]} != inducing width {z.shape[1]}")
    sf2, sn2 = kp.signal_var, kp.noise_var

    kuu = kernel_matrix(kp, z)
    chol = cholesky_psd(kuu, jitter_ladder)
    l = chol.lower
    kuf = kernel_matrix(kp, z, feats)
    a = tri_solve(chol, kuf, "lower")
    mean = a.T @ mu
    lqt_a = lq.T @ a
    var = sf2 - np.sum(a * a, 0) + np.sum(lqt_a * lqt_a, 0)
    resid = y - mean
    quad = float(resid @ resid + var.sum())
    ell = -0.5 * b * (LOG_2PI + np.log(sn2)) - 0.5 * quad / sn2
    scale = total_n / b
    kl = kl_whitened(mu, lq)
    elbo = scale * ell - kl

    g_mean = scale * resid / sn2
    g_var = -0.5 * scale / sn2  # same for every point
    g_a = np.outer(mu, g_mean) + 2.0 * g_var * (lq @ lqt_a - a)
    g_mu = a @ g_mean - mu
    diag_lq = np.diag(lq)
    g_lq = 2.0 * g_var * (a @ lqt_a.T) - lq
    g_lq[np.diag_indices_from(g_lq)] += 1.0 / diag_lq
    g_raw = np.tril(g_lq, -1)
    g_raw[np.diag_indices_from(g_raw)] = np.diag(g_lq) * diag_lq
    g_log_sn = scale * (quad / sn2 - b)
    g_log_sf = g_var * b * 2.0 * sf2

    g_kuf = tri_solve(chol, g_a, "lower-transpose")
    g_l = -np.tril(g_kuf @ a.T)
    g_kuu = cholesky_backward(l, g_l)
    gk1, gz_a, gz_b = rbf_backward(kp, z, z, kuu, g_kuu)
    gk2, gz_c, g_feats = rbf_backward(kp, z, feats, kuf, g_kuf)

    grads = {
        "log_sf": np.array([g_log_sf + gk1.log_signal_std + gk2.log_signal_std]),
        "log_ls": gk1.log_lengthscales + gk2.log_lengthscales,
        "log_sn": np.array([g_log_sn]),
        "Z": gz_a + gz_b + gz_c,
        "mu": g_mu,
        "Lraw": g_raw,
    }
    return float(elbo), grads, g_feats


HEAD_KEYS = ("log_sf", "log_ls", "log_sn", "Z", "mu", "Lraw")
PARAM_GROUPS = {
    "log_sf": "kernel",
    "log_ls": "kernel",
    "log_sn": "kernel",
    "Z": "inducing",
    "mu": "variational",
    "Lraw": "variational",
}


def get_params(model: SvdklModel) -> dict[str, np.ndarray]:
    """Flat name → array view of every trainable parameter (copies)."""
    p: dict[str, np.ndarray] = {}
    if model.extractor is not None:
        for i, (w, b) in enumerate(zip(model.extractor.weights, model.extractor.biases)):
            p[f"net.W{i}"] = w.copy()
            p[f"net.b{i}"] = b.copy()
    for t, h in enumerate(model.heads):
        p[f"h{t}.log_sf"] = np.array([h.kernel.log_signal_std])
        p[f"h{t}.log_ls"] = h.kernel.log_lengthscales.copy()
        p[f"h{t}.log_sn"] = np.array([h.kernel.log_noise_std])
        p[f"h{t}.Z"] = h.variational.inducing_inputs.copy()
        p[f"h{t}.mu"] = h.variational.var_mean.copy()
        p[f"h{t}.Lraw"] = h.variational.var_chol_raw.copy()
    return p


def set_params(model: SvdklModel, params: dict[str, np.ndarray]) -> None:
    for name, value in params.items():
        owner, key = name.split(".", 1)
        if owner == "net":
            idx = int(key[1:])
            (model.extractor.weights if key[0] == "W" else model.extractor.biases)[idx] = value
            continue
        h = model.heads[int(owner[1:])]
        if key == "log_sf":
            h.kernel.log_signal_std = float(value[0])
        elif key == "log_ls":
            h.kernel.log_lengthscales = value
        elif key == "log_sn":
            h.kernel.log_noise_std = float(value[0])
        elif key == "Z":
            h.variational.inducing_inputs = value
        elif key == "mu":
            h.variational.var_mean = value
        elif key == "Lraw":
            h.variational.var_chol_raw = np.tril(value)
        else:
            raise KeyError(name)


def param_group(name: str) -> str:
    owner, key = name.split(".", 1)
    return "extractor" if owner == "net" else PARAM_GROUPS[key]


def total_elbo_and_grads(
    model: SvdklModel,
    xn: np.ndarray,
    yn: np.ndarray,
    total_n: int,
    tasks: Sequence[int] | None = None,
) -> tuple[float, dict[str, np.ndarray], list[float]]:
    """Sum of per-task ELBOs on normalized inputs/targets, with gradients.

    The extractor runs forward once; its gradient is accumulated over tasks
    in ascending task order.
    """
    xn = np.atleast_2d(np.asarray(xn, dtype=np.float64))
    yn = np.asarray(yn, dtype=np.float64)
    if yn.ndim == 1:
        yn = yn[:, None]
    tasks = range(model.n_tasks) if tasks is None else tasks
    feats, tape = model.features(xn)
    grads: dict[str, np.ndarray] = {}
    g_feats = np.zeros_like(feats)
    per_task = []
    for col, t in enumerate(tasks):
        ycol = yn[:, t] if yn.shape[1] == model.n_tasks else yn[:, col]
        e, g, gf = head_elbo(model.heads[t], feats, ycol, total_n)
        per_task.append(e)
        for k, v in g.items():
            grads[f"h{t}.{k}"] = v
        g_feats += gf
    if model.extractor is not None:
        gnet, _ = mlp_backward(model.extractor, tape, g_feats)
        for i, (gw, gb) in enumerate(zip(gnet.weights, gnet.biases)):
            grads[f"net.W{i}"] = gw
            grads[f"net.b{i}"] = gb
    return float(sum(per_task)), grads, per_task


def elbo_and_grads(model: SvdklModel, task: int, batch_x, batch_y, total_n: int):
    """ELBO of one task on a normalized batch, with gradients for that head
    and the shared extractor."""
    batch_x = np.atleast_2d(np.asarray(batch_x, dtype=np.float64))
    batch_y = np.asarray(batch_y, dtype=np.float64).reshape(-1)
    if total_n < batch_x.shape[0]:
        raise ValueError("total_n must be at least the batch size")
    elbo, grads, _ = total_elbo_and_grads(model, batch_x, batch_y[:, None], total_n, tasks=[task])
    return elbo, grads


def optimal_variational(head: TaskHead, feats: np.ndarray, y: np.ndarray, total_n: int | None = None) -> None:
    """Set q(v) to the closed-form optimum of the ELBO for fixed kernel and Z."""
    b = feats.shape[0]
    scale = (total_n or b) / b
    kp = head.kernel
    chol = cholesky_psd(kernel_matrix(kp, head.variational.inducing_inputs))
    a = tri_solve(chol, kernel_matrix(kp, head.variational.inducing_inputs, feats), "lower")
    prec = np.eye(a.shape[0]) + scale * (a @ a.T) / kp.noise_var
    pchol = cholesky_psd(prec)
    mu = scale * sla.cho_solve((pchol.lower, True), a @ y) / kp.noise_var
    # S = prec^{-1}; Lq = chol(S) obtained from the inverse of the precision factor
    inv_lower = tri_solve(pchol, np.eye(a.shape[0]), "lower")
    s = inv_lower.T @ inv_lower
    head.variational.var_mean = mu
    head.variational.set_var_chol(cholesky_psd(s).lower)


# ---------------------------------------------------------------------------
# prediction


class Predictor:
    """Immutable prediction snapshot of a model.

    Factorizes every head's K_uu once so repeated queries cost one
    extractor pass plus an O(m²) solve per head.
    """

    def __init__(self, model: SvdklModel):
        self.model = model
        self._chols = [
            cholesky_psd(kernel_matrix(h.kernel, h.variational.inducing_inputs)) for h in model.heads
        ]
        self._lqs = [h.variational.var_chol for h in model.heads]

    def normalized(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Latent mean/std with noise, in normalized units, shape (N, tasks)."""
        xn = np.atleast_2d(self.model.normalize_inputs(x))
        feats, _ = self.model.features(xn)
        n = xn.shape[0]
        means = np.empty((n, self.model.n_tasks))
        stds = np.empty_like(means)
        for t, (h, chol, lq) in enumerate(zip(self.model.heads, self._chols, self._lqs)):
            kp = h.kernel
            a = tri_solve(chol, kernel_matrix(kp, h.variational.inducing_inputs, feats), "lower")
            lqt_a = lq.T @ a
            latent = kp.signal_var - np.sum(a * a, 0) + np.sum(lqt_a * lqt_a, 0)
            means[:, t] = a.T @ h.variational.var_mean
            stds[:, t] = np.sqrt(np.maximum(latent, 0.0) + kp.noise_var)
        return means, stds

    def __call__(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Mean and std in target units, each shaped (N, tasks) (or (tasks,) for one input)."""
        x = np.asarray(x, dtype=np.float64)
        means, stds = self.normalized(x)
        t_mean = np.array([h.target_mean for h in self.model.heads])
        t_std = np.array([h.target_std for h in self.model.heads])
        means = means * t_std + t_mean
        stds = stds * t_std
        if x.ndim == 1:
            return means[0], stds[0]
        return means, stds

    def noise_floor(self) -> np.ndarray:
        return np.array([h.noise_std for h in self.model.heads])

    def signal_std(self) -> np.ndarray:
        return np.array([h.signal_std for h in self.model.heads])


def predict(model: SvdklModel, task: int, x) -> PredictiveDist:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionMismatch("predict expects a single input vector")
    sub = SvdklModel(model.extractor, [model.heads[task]], model.input_mean, model.input_std)
    mean, std = Predictor(sub)(x)
    return PredictiveDist(float(mean[0]), float(std[0]))


def predict_all(model: SvdklModel, x) -> list[PredictiveDist]:
    mean, std = Predictor(model)(np.asarray(x, dtype=np.float64).reshape(-1))
    return [PredictiveDist(float(m), float(s)) for m, s in zip(mean, std)]


# ---------------------------------------------------------------------------
# exact GP oracle


def exact_gp_oracle(kernel: RbfParams, xs, ys, xstar) -> PredictiveDist:
    """Closed-form GP posterior at ``xstar`` with Gaussian noise σ_n²."""
    xs = np.asarray(xs, dtype=np.float64).reshape(-1, kernel.dim)
    ys = np.asarray(ys, dtype=np.float64).reshape(-1)
    xstar = np.asarray(xstar, dtype=np.float64).reshape(1, kernel.dim)
    if xs.shape[0] > 512:
        raise ValueError("exact GP oracle is limited to N <= 512")
    prior = kernel.signal_var + kernel.noise_var
    if xs.shape[0] == 0:
        return PredictiveDist(0.0, float(np.sqrt(prior)))
    chol = cholesky_psd(kernel_matrix(kernel, xs) + kernel.noise_var * np.eye(xs.shape[0]))
    ks = kernel_matrix(kernel, xs, xstar)[:, 0]
    v = tri_solve(chol, ks, "lower")
    alpha = tri_solve(chol, tri_solve(chol, ys, "lower"), "lower-transpose")
    var = prior - v @ v
    return PredictiveDist(float(ks @ alpha), float(np.sqrt(max(var, kernel.noise_var))))


def exact_log_marginal(kernel: RbfParams, xs, ys) -> float:
    xs = np.asarray(xs, dtype=np.float64).reshape(-1, kernel.dim)
    ys = np.asarray(ys, dtype=np.float64).reshape(-1)
    n = xs.shape[0]
    chol = cholesky_psd(kernel_matrix(kernel, xs) + kernel.noise_var * np.eye(n))
    w = tri_solve(chol, ys, "lower")
    return float(-0.5 * w @ w - np.sum(np.log(np.diag(chol.lower))) - 0.5 * n * LOG_2PI)


# ---------------------------------------------------------------------------
# serialization


def save_model(path: str | Path, model: SvdklModel) -> None:
    """Write a self-describing .npz container; values round-trip bit-exactly."""
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "kind": model.kind,
        "n_tasks": model.n_tasks,
        "activation": None if model.extractor is None else model.extractor.activation,
        "n_layers": 0 if model.extractor is None else len(model.extractor.weights),
        "online_ready": model.online_ready,
        "n_seen": model.n_seen,
        "model_version": model.version,
        "dtype": "float64",
    }
    arrays = {"input_mean": model.input_mean, "input_std": model.input_std}
    for name, value in get_params(model).items():
        arrays[name] = value
    arrays["target_mean"] = np.array([h.target_mean for h in model.heads])
    arrays["target_std"] = np.array([h.target_std for h in model.heads])
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header, sort_keys=True)), **arrays)


def load_model(path: str | Path) -> SvdklModel:
    with np.load(path, allow_pickle=False) as data:
        try:
            header = json.loads(str(data["__header__"]))
        except KeyError:
            raise VersionMismatch(f"{path} is not a model container") from None
        if header.get("format") != FORMAT_NAME or header.get("version") != FORMAT_VERSION:
            raise VersionMismatch(
                f"container {header.get('format')!r} v{header.get('version')} "
                f"is not {FORMAT_NAME} v{FORMAT_VERSION}"
            )
        arrays = {k: data[k] for k in data.files if k != "__header__"}
    extractor = None
    if header["kind"] == "svdkl":
        n_layers = header["n_layers"]
        extractor = MlpParams(
            [arrays[f"net.W{i}"] for i in range(n_layers)],
            [arrays[f"net.b{i}"] for i in range(n_layers)],
            header["activation"],
        )
    heads = []
    for t in range(header["n_tasks"]):
        heads.append(
            TaskHead(
                RbfParams(
                    float(arrays[f"h{t}.log_sf"][0]),
                    arrays[f"h{t}.log_ls"],
                    float(arrays[f"h{t}.log_sn"][0]),
                ),
                VariationalState(arrays[f"h{t}.Z"], arrays[f"h{t}.mu"], arrays[f"h{t}.Lraw"]),
                float(arrays["target_mean"][t]),
                float(arrays["target_std"][t]),
            )
        )
    return SvdklModel(
        extractor,
        heads,
        arrays["input_mean"],
        arrays["input_std"],
        bool(header["online_ready"]),
        int(header["n_seen"]),
        int(header["model_version"]),
    )

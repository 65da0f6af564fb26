"""ARD squared-exponential kernel, its deep composition with the MLP, and
reverse-mode gradients.

Hyperparameters live in log space. The observation noise σ_n is stored
here but only the likelihood and predictive code add it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch
from .mlp import MlpParams, mlp_backward, mlp_forward


@dataclass
class RbfParams:
    log_signal_std: float
    log_lengthscales: np.ndarray
    log_noise_std: float

    @classmethod
    def default(cls, dim: int) -> "RbfParams":
        return cls(0.0, np.zeros(dim), float(np.log(0.1)))

    @property
    def dim(self) -> int:
        return self.log_lengthscales.shape[0]

    @property
    def signal_var(self) -> float:
        return float(np.exp(2.0 * self.log_signal_std))

    @property
    def noise_var(self) -> float:
        return float(np.exp(2.0 * self.log_noise_std))

    @property
    def lengthscales(self) -> np.ndarray:
        return np.exp(self.log_lengthscales)

    def copy(self) -> "RbfParams":
        return RbfParams(
            float(self.log_signal_std), self.log_lengthscales.copy(), float(self.log_noise_std)
        )


@dataclass
class RbfGrads:
    log_signal_std: float
    log_lengthscales: np.ndarray
    log_noise_std: float = 0.0


def _check(p: RbfParams, *arrays: np.ndarray) -> None:
    for a in arrays:
        if a.shape[-1] != p.dim:
            raise DimensionMismatch(f"input width {a.shape[-1]} != lengthscale count {p.dim}")


def rbf_eval(p: RbfParams, x, x2) -> float:
    x = np.asarray(x, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    _check(p, x, x2)
    r = (x - x2) / p.lengthscales
    return float(p.signal_var * np.exp(-0.5 * np.dot(r, r)))


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def kernel_matrix(p: RbfParams, xs, xs2=None) -> np.ndarray:
    """Gram matrix k(xs[i], xs2[j]); symmetric when ``xs2`` is omitted."""
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    same = xs2 is None
    xs2 = xs if same else np.atleast_2d(np.asarray(xs2, dtype=np.float64))
    _check(p, xs, xs2)
    ell = p.lengthscales
    a = xs / ell
    b = a if same else xs2 / ell
    k = p.signal_var * np.exp(-0.5 * _sqdist(a, b))
    if same:
        k = 0.5 * (k + k.T)
        np.fill_diagonal(k, p.signal_var)
    return k


def deep_kernel_eval(p: RbfParams, net: MlpParams, x, x2) -> float:
    fx, _ = mlp_forward(net, x)
    fx2, _ = mlp_forward(net, x2)
    return rbf_eval(p, fx, fx2)


def rbf_backward(
    p: RbfParams, xs: np.ndarray, xs2: np.ndarray, k: np.ndarray, upstream: np.ndarray
) -> tuple[RbfGrads, np.ndarray, np.ndarray]:
    """Gradients of ⟨upstream, K⟩ given the already evaluated ``k``.

    Returns (hyperparameter grads, d/dxs, d/dxs2). When xs and xs2 are the
    same array the caller should add the two input gradients.
    """
    if upstream.shape != k.shape:
        raise DimensionMismatch(f"upstream {upstream.shape} != kernel {k.shape}")
    w = upstream * k
    inv_l2 = np.exp(-2.0 * p.log_lengthscales)
    rs = w.sum(1)
    cs = w.sum(0)
    g_sf = 2.0 * float(w.sum())
    # Σ_ij w_ij (x_id - x2_jd)^2 expanded to avoid the N×M×d tensor
    sq = rs @ (xs * xs) + cs @ (xs2 * xs2) - 2.0 * np.einsum("id,ij,jd->d", xs, w, xs2)
    g_ell = sq * inv_l2
    gx = -(rs[:, None] * xs - w @ xs2) * inv_l2
    gx2 = (w.T @ xs - cs[:, None] * xs2) * inv_l2
    return RbfGrads(g_sf, g_ell), gx, gx2


def kernel_grads(p: RbfParams, xs, xs2, upstream, net: MlpParams | None = None):
    """Reverse-mode gradients of ⟨upstream, K(xs, xs2)⟩.

    Without ``net`` the kernel acts on raw inputs. With ``net`` the inputs
    pass through the extractor first and the extractor weights receive
    gradients too. Returns (RbfGrads, MlpParams grads or None,
    (d/dxs, d/dxs2)).
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    xs2 = np.atleast_2d(np.asarray(xs2, dtype=np.float64))
    upstream = np.asarray(upstream, dtype=np.float64)
    if net is None:
        k = kernel_matrix(p, xs, xs2)
        g, gx, gx2 = rbf_backward(p, xs, xs2, k, upstream)
        return g, None, (gx, gx2)
    f1, t1 = mlp_forward(net, xs)
    f2, t2 = mlp_forward(net, xs2)
    k = kernel_matrix(p, f1, f2)
    g, gf1, gf2 = rbf_backward(p, f1, f2, k, upstream)
    gnet1, gx = mlp_backward(net, t1, gf1)
    gnet2, gx2 = mlp_backward(net, t2, gf2)
    gnet = MlpParams(
        [a + b for a, b in zip(gnet1.weights, gnet2.weights)],
        [a + b for a, b in zip(gnet1.biases, gnet2.biases)],
        net.activation,
    )
    return g, gnet, (gx, gx2)

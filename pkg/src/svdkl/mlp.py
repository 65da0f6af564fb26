"""Fully connected feature extractor with a hand-written reverse pass.

Hidden layers share one activation (relu or tanh); the output layer is
linear so features can take any real value. Inputs may be a single
vector or a batch of row vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, InvalidArchitecture, StaleTape

ACTIVATIONS = ("relu", "tanh")


@dataclass
class MlpParams:
    weights: list[np.ndarray]  # layer l: (widths[l+1], widths[l])
    biases: list[np.ndarray]
    activation: str = "relu"

    @property
    def layer_widths(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "MlpParams":
        return MlpParams(
            [w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activation
        )

    def zeros_like(self) -> "MlpParams":
        return MlpParams(
            [np.zeros_like(w) for w in self.weights],
            [np.zeros_like(b) for b in self.biases],
            self.activation,
        )


@dataclass
class Tape:
    """Per-layer inputs and pre-activations recorded by the forward pass."""

    inputs: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)
    batched: bool = True


def mlp_init(layer_widths: Sequence[int], activation: str = "relu", seed: int = 0) -> MlpParams:
    """He (relu) or LeCun (tanh) normal initialization with zero biases."""
    widths = [int(w) for w in layer_widths]
    if len(widths) < 2 or any(w <= 0 for w in widths):
        raise InvalidArchitecture(f"need at least two positive widths, got {list(layer_widths)}")
    if activation not in ACTIVATIONS:
        raise InvalidArchitecture(f"activation must be one of {ACTIVATIONS}, got {activation!r}")
    rng = np.random.default_rng(seed)
    gain = 2.0 if activation == "relu" else 1.0
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(rng.normal(0.0, np.sqrt(gain / fan_in), size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, activation)


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _act_grad(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    t = np.tanh(z)
    return 1.0 - t * t


def mlp_forward(params: MlpParams, x) -> tuple[np.ndarray, Tape]:
    """Map inputs (d_in,) or (B, d_in) to features, recording a tape."""
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 2
    h = x if batched else x[None, :]
    if h.ndim != 2 or h.shape[1] != params.input_dim:
        raise DimensionMismatch(f"expected input width {params.input_dim}, got shape {x.shape}")
    tape = Tape(batched=batched)
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        tape.inputs.append(h)
        z = h @ w.T + b
        tape.preacts.append(z)
        h = z if i == last else _act(z, params.activation)
    return (h if batched else h[0]), tape


def mlp_backward(
    params: MlpParams, tape: Tape, grad_output
) -> tuple[MlpParams, np.ndarray]:
    """Reverse pass for ⟨grad_output, g(x, w)⟩.

    Returns gradients shaped like ``params`` and the gradient with respect
    to the input (same shape as the forward input).
    """
    g = np.asarray(grad_output, dtype=np.float64)
    if not tape.batched:
        g = g[None, :]
    if len(tape.preacts) != len(params.weights) or any(
        z.shape[1] != w.shape[0] for z, w in zip(tape.preacts, params.weights)
    ):
        raise StaleTape("tape does not match the parameter shapes")
    if g.shape != tape.preacts[-1].shape:
        raise DimensionMismatch(f"grad_output shape {g.shape} != output {tape.preacts[-1].shape}")
    grads = params.zeros_like()
    last = len(params.weights) - 1
    for i in range(last, -1, -1):
        if i != last:
            g = g * _act_grad(tape.preacts[i], params.activation)
        grads.weights[i] = g.T @ tape.inputs[i]
        grads.biases[i] = g.sum(axis=0)
        g = g @ params.weights[i]
    return grads, (g if tape.batched else g[0])

"""Fully-connected networks, Adam, and checkpoint serialization.

Everything is double precision. A frozen `Mlp` is immutable for inference
(`forward`); training goes through `Mlp.apply` with an explicit parameter
list so the autodiff tape owns the parameters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import TrainingError, Var

_HIDDEN = {"relu": ad.relu, "gelu": ad.gelu}
_OUTPUT = {"identity": None, "sigmoid": lambda v: ad.sigmoid(v, clamp=True)}


@dataclass
class Mlp:
    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden_activation: str = "relu"
    output_activation: str = "identity"

    @classmethod
    def create(cls, layer_dims, rng: np.random.Generator,
               hidden_activation: str = "relu",
               output_activation: str = "identity") -> "Mlp":
        if hidden_activation not in _HIDDEN:
            raise ValueError(f"unknown hidden activation {hidden_activation!r}")
        if output_activation not in _OUTPUT:
            raise ValueError(f"unknown output activation {output_activation!r}")
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            # symmetric uniform init on +-sqrt(6 / (fan_in + fan_out))
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(list(layer_dims), weights, biases, hidden_activation, output_activation)

    @property
    def params(self) -> list[np.ndarray]:
        """Flat parameter list, alternating weight/bias per layer."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def set_params(self, params: list[np.ndarray]) -> None:
        n = len(self.weights)
        if len(params) != 2 * n:
            raise ValueError("parameter count mismatch")
        self.weights = [np.asarray(params[2 * i], dtype=np.float64) for i in range(n)]
        self.biases = [np.asarray(params[2 * i + 1], dtype=np.float64) for i in range(n)]

    def apply(self, x, params: list[Var] | None = None) -> Var:
        """Graph-building forward pass. `params` (Vars) override stored arrays."""
        h = ad.as_var(x)
        n = len(self.weights)
        act = _HIDDEN[self.hidden_activation]
        for i in range(n):
            w = params[2 * i] if params is not None else Var(self.weights[i])
            b = params[2 * i + 1] if params is not None else Var(self.biases[i])
            h = ad.affine(h, w, b)
            if i < n - 1:
                h = act(h)
        out_act = _OUTPUT[self.output_activation]
        return out_act(h) if out_act is not None else h

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Inference forward pass (pure numpy, no tape)."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.layer_dims[0]:
            raise ValueError(
                f"input dimension {x.shape[-1]} != layer_dims[0]={self.layer_dims[0]}")
        h = x
        n = len(self.weights)
        for i in range(n):
            h = h @ self.weights[i] + self.biases[i]
            if i < n - 1:
                if self.hidden_activation == "relu":
                    h = np.maximum(h, 0.0)
                else:  # gelu, tanh form
                    inner = np.sqrt(2.0 / np.pi) * (h + 0.044715 * h**3)
                    h = 0.5 * h * (1.0 + np.tanh(inner))
        if self.output_activation == "sigmoid":
            pos = h >= 0
            s = np.where(pos, 1.0 / (1.0 + np.exp(-np.where(pos, h, 0.0))), 0.0)
            ev = np.exp(np.where(pos, 0.0, h))
            s = np.where(pos, s, ev / (1.0 + ev))
            h = np.clip(s, 1e-7, 1.0 - 1e-7)
        return h

    def assert_finite(self) -> None:
        for p in self.params:
            if not np.all(np.isfinite(p)):
                raise TrainingError("non-finite network parameters")

    def to_dict(self) -> dict:
        return {
            "layer_dims": list(self.layer_dims),
            "activations": [self.hidden_activation, self.output_activation],
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Mlp":
        hidden, output = d["activations"]
        return cls(
            layer_dims=list(d["layer_dims"]),
            weights=[np.asarray(w, dtype=np.float64) for w in d["weights"]],
            biases=[np.asarray(b, dtype=np.float64) for b in d["biases"]],
            hidden_activation=hidden,
            output_activation=output,
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Mlp":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float = 1e-3,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps, step_count=0,
                   m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params])


def adam_step(state: AdamState, params: list[np.ndarray],
              grads: list[np.ndarray], lr: float | None = None):
    """Bias-corrected Adam update; returns (new_params, state).

    epsilon is added outside the square root:
    ``p -= lr * m_hat / (sqrt(v_hat) + eps)``.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("shape mismatch between params, grads and state")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient entries")
    eta = state.lr if lr is None else lr
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    new_params = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        new_params.append(p - eta * m_hat / (np.sqrt(v_hat) + state.eps))
    return new_params, state


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0
    # step-wise schedule: multiply lr by lr_decay every lr_step epochs
    lr_decay: float = 0.5
    lr_step: int | None = None  # defaults to ceil(epochs / 4)

    def lr_at(self, epoch: int) -> float:
        step = self.lr_step or max(1, int(np.ceil(self.epochs / 4)))
        return self.lr * self.lr_decay ** (epoch // step)


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    """Yield index arrays covering a shuffled range(n)."""
    idx = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield idx[lo:lo + batch_size]

"""Linear structural causal model: simulation and exact counterfactual oracles.

Dynamics (time index t = 0..T-1, histories zero-padded before t = 0):

    X_0 ~ uniform(0, 1)
    X_t = g0 + sum_k gt[k-1] * A_{t-k} + sum_k gx[k-1] * X_{t-k}     k = 1..d-1
    P(A_t = 1) = sigmoid(b0 + sum_k bt[k-1] * A_{t-k}               k = 1..d-1
                            + sum_k bx[k] * X_{t-k})                k = 0..d-1
    Y_t = a0 + sum_k at[k] * A_{t-k} + sum_k ax[k] * X_{t-k} + eps  k = 0..d-1

with eps ~ N(0, noise_variance). Coefficient blocks are ordered newest lag
first (index k multiplies lag k); this is the only ordering under which the
covariate recursion stays bounded for the d=3 and d=5 benchmark presets.

The counterfactual oracle clamps the final d treatments of an observational
prefix and regenerates the covariates before emitting Y, which yields exact
draws from the counterfactual law.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "ScmCoefficients",
    "StaticCovariateConfig",
    "ScmConfig",
    "Trajectory",
    "WindowSample",
    "TABLE_PRESETS",
    "preset_coefficients",
    "simulate_dataset",
    "windowize",
    "sample_counterfactual",
    "counterfactual_from_trajectory",
    "save_trajectories",
    "load_trajectories",
    "all_combos",
    "combo_to_array",
]


def stable_sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    pos = z >= 0
    out = np.where(pos, 1.0 / (1.0 + np.exp(-np.where(pos, z, 0.0))), 0.0)
    ez = np.exp(np.where(pos, 0.0, z))
    return np.where(pos, out, ez / (1.0 + ez))


class ConfigurationError(ValueError):
    """Coefficient/config shapes that cannot describe a valid model."""


@dataclass(frozen=True)
class ScmCoefficients:
    """Coefficient vectors laid out (intercept, treatment block, covariate block).

    Lengths: alpha 1+2d, beta 2d, gamma 2d-1. Within each block the first
    element multiplies the most recent lag.
    """

    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    noise_variance: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=np.float64))
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=np.float64))
        object.__setattr__(self, "gamma", np.asarray(self.gamma, dtype=np.float64))
        if self.noise_variance <= 0:
            raise ConfigurationError("noise_variance must be > 0")

    @property
    def d(self) -> int:
        return (len(self.alpha) - 1) // 2

    def validate(self, d: int) -> None:
        if len(self.alpha) != 1 + 2 * d:
            raise ConfigurationError(
                f"alpha has length {len(self.alpha)}, expected {1 + 2 * d} for d={d}")
        if len(self.beta) != 2 * d:
            raise ConfigurationError(
                f"beta has length {len(self.beta)}, expected {2 * d} for d={d}")
        if len(self.gamma) != 2 * d - 1:
            raise ConfigurationError(
                f"gamma has length {len(self.gamma)}, expected {2 * d - 1} for d={d}")

    # block views, newest lag first
    @property
    def a0(self) -> float:
        return float(self.alpha[0])

    @property
    def at(self) -> np.ndarray:  # lags 0..d-1 on A
        return self.alpha[1:1 + self.d]

    @property
    def ax(self) -> np.ndarray:  # lags 0..d-1 on X
        return self.alpha[1 + self.d:]

    @property
    def b0(self) -> float:
        return float(self.beta[0])

    @property
    def bt(self) -> np.ndarray:  # lags 1..d-1 on A
        return self.beta[1:self.d]

    @property
    def bx(self) -> np.ndarray:  # lags 0..d-1 on X
        return self.beta[self.d:]

    @property
    def g0(self) -> float:
        return float(self.gamma[0])

    @property
    def gt(self) -> np.ndarray:  # lags 1..d-1 on A
        return self.gamma[1:self.d]

    @property
    def gx(self) -> np.ndarray:  # lags 1..d-1 on X
        return self.gamma[self.d:]

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha.tolist(),
            "beta": self.beta.tolist(),
            "gamma": self.gamma.tolist(),
            "noise_variance": self.noise_variance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScmCoefficients":
        return cls(d["alpha"], d["beta"], d["gamma"], d.get("noise_variance", 0.05))


TABLE_PRESETS: dict[str, dict] = {
    "table4-d1": dict(alpha=[-3, 2, -1], beta=[-0.5, 0.5], gamma=[0.0]),
    "table4-d3": dict(
        alpha=[-1, 12, 6, 3, 2, 1, 0.5],
        beta=[-0.5, 0.5, -0.5, 0.5, -0.5, 0.5],
        gamma=[-1, 1.5, 1, -1.5, -1],
    ),
    "table4-d5": dict(
        alpha=[-1, 12, 6, 3, 1, 0.5, 2, 1, 0.5, 0.1, 0.05],
        beta=[-0.5, 0.5, -0.5, 0.5, -0.5, 0.5, -0.5, 0.5, -0.5, 0.5],
        gamma=[-1, 1.5, 1, 0.5, 0.1, -1.5, -1, -0.5, -0.1],
    ),
}


def preset_coefficients(name: str, noise_variance: float = 0.05) -> ScmCoefficients:
    if name not in TABLE_PRESETS:
        raise ConfigurationError(
            f"unknown preset {name!r}; choose from {sorted(TABLE_PRESETS)}")
    p = TABLE_PRESETS[name]
    return ScmCoefficients(p["alpha"], p["beta"], p["gamma"], noise_variance)


@dataclass(frozen=True)
class StaticCovariateConfig:
    """Per-trajectory static covariate V ~ uniform(low, high), entering the
    covariate, propensity-logit and outcome forms linearly."""

    low: float = -1.0
    high: float = 1.0
    coef_x: float = 0.5
    coef_a: float = 0.5
    coef_y: float = 1.0


@dataclass(frozen=True)
class ScmConfig:
    d: int
    T: int = 100
    n_traj: int = 2000
    seed: int = 0
    beta0_override: float | None = None
    static_covariate: StaticCovariateConfig | None = None

    def __post_init__(self):
        if self.d < 1:
            raise ConfigurationError("d must be >= 1")
        if self.T < self.d:
            raise ConfigurationError("T must be >= d")
        if self.n_traj < 1:
            raise ConfigurationError("n_traj must be >= 1")


@dataclass(frozen=True)
class Trajectory:
    x: np.ndarray  # (T,)
    a: np.ndarray  # (T,) in {0, 1}
    y: np.ndarray  # (T, m)
    v: float | None = None


@dataclass(frozen=True)
class WindowSample:
    """One training tuple: outcome at t, the length-d treatment/covariate
    windows ending at t (oldest first), and the pre-window context needed to
    evaluate every per-step propensity with its full lag history."""

    y: np.ndarray          # (m,)
    a_window: np.ndarray   # (d,)
    x_window: np.ndarray   # (d,)
    v: float | None = None
    a_context: np.ndarray | None = None  # (d,) treatments before the window
    x_context: np.ndarray | None = None  # (d-1,) covariates before the window


def _lag_matrix(series: np.ndarray, t: int, lags: range) -> np.ndarray:
    """Stack columns series[:, t-k] for k in lags, zero where t-k < 0."""
    n = series.shape[0]
    cols = [series[:, t - k] if t - k >= 0 else np.zeros(n) for k in lags]
    return np.column_stack(cols) if cols else np.zeros((n, 0))


def _simulate_arrays(coeffs: ScmCoefficients, config: ScmConfig,
                     x0: np.ndarray, a_uniforms: np.ndarray, y_noise: np.ndarray,
                     v: np.ndarray | None,
                     clamp_from: int | None = None,
                     a_bar: np.ndarray | None = None):
    """Run the recurrences for a batch of trajectories sharing length T.

    `a_uniforms` (n, T) drives the treatment draws; with `clamp_from` set,
    treatments at t >= clamp_from are fixed to `a_bar` (oldest first) and the
    covariates regenerate accordingly (the counterfactual clamping step).
    Returns (X, A, Y, P) each (n, T)-shaped (Y is (n, T)).
    """
    d = config.d
    n, T = a_uniforms.shape
    b0 = coeffs.b0 if config.beta0_override is None else float(config.beta0_override)
    sc = config.static_covariate
    v_x = sc.coef_x * v if (sc is not None and v is not None) else None
    v_a = sc.coef_a * v if (sc is not None and v is not None) else None
    v_y = sc.coef_y * v if (sc is not None and v is not None) else None

    X = np.zeros((n, T))
    A = np.zeros((n, T))
    Y = np.zeros((n, T))
    P = np.zeros((n, T))
    X[:, 0] = x0
    for t in range(T):
        if t > 0:
            X[:, t] = (coeffs.g0
                       + _lag_matrix(A, t, range(1, d)) @ coeffs.gt
                       + _lag_matrix(X, t, range(1, d)) @ coeffs.gx)
            if v_x is not None:
                X[:, t] += v_x
        logit = (b0
                 + _lag_matrix(A, t, range(1, d)) @ coeffs.bt
                 + _lag_matrix(X, t, range(0, d)) @ coeffs.bx)
        if v_a is not None:
            logit += v_a
        P[:, t] = stable_sigmoid(logit)
        if clamp_from is not None and t >= clamp_from:
            A[:, t] = a_bar[t - clamp_from]
        else:
            A[:, t] = a_uniforms[:, t] < P[:, t]
        Y[:, t] = (coeffs.a0
                   + _lag_matrix(A, t, range(0, d)) @ coeffs.at
                   + _lag_matrix(X, t, range(0, d)) @ coeffs.ax
                   + y_noise[:, t])
        if v_y is not None:
            Y[:, t] += v_y
    return X, A, Y, P


def _draw_streams(config: ScmConfig, n: int, index_offset: int = 0):
    """Per-trajectory randomness, one child stream per (seed, trajectory index)."""
    T = config.T
    x0 = np.empty(n)
    a_uniforms = np.empty((n, T))
    y_noise = np.empty((n, T))
    v = np.empty(n) if config.static_covariate is not None else None
    for i in range(n):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=config.seed, spawn_key=(index_offset + i,)))
        x0[i] = rng.uniform(0.0, 1.0)
        a_uniforms[i] = rng.uniform(size=T)
        y_noise[i] = rng.standard_normal(T)
        if v is not None:
            sc = config.static_covariate
            v[i] = rng.uniform(sc.low, sc.high)
    return x0, a_uniforms, y_noise, v


def simulate_dataset(config: ScmConfig, coeffs: ScmCoefficients) -> list[Trajectory]:
    """Observational data; deterministic given (config, coeffs, seed) and
    invariant to how trajectories would be partitioned across workers."""
    coeffs.validate(config.d)
    x0, a_uniforms, y_noise, v = _draw_streams(config, config.n_traj)
    noise = np.sqrt(coeffs.noise_variance) * y_noise
    X, A, Y, _ = _simulate_arrays(coeffs, config, x0, a_uniforms, noise, v)
    return [
        Trajectory(x=X[i].copy(), a=A[i].copy(), y=Y[i, :, None].copy(),
                   v=float(v[i]) if v is not None else None)
        for i in range(config.n_traj)
    ]


def windowize(trajectories: list[Trajectory], d: int) -> list[WindowSample]:
    """One sample per window end t ∈ {d-1..T-1} (0-based), with pre-window
    context retained for propensity evaluation. Rejects short trajectories."""
    samples: list[WindowSample] = []
    for idx, traj in enumerate(trajectories):
        T = len(traj.a)
        if T < d:
            raise ValueError(f"trajectory {idx} has length {T} < d={d}")
        a_ext = np.concatenate([np.zeros(d), traj.a])  # zero history before t=0
        x_ext = np.concatenate([np.zeros(d - 1), traj.x]) if d > 1 else traj.x
        for t in range(d - 1, T):
            samples.append(WindowSample(
                y=np.atleast_1d(traj.y[t]).astype(np.float64),
                a_window=traj.a[t - d + 1:t + 1].copy(),
                x_window=traj.x[t - d + 1:t + 1].copy(),
                v=traj.v,
                a_context=a_ext[t - d + 1:t + 1].copy(),
                x_context=x_ext[t - d + 1:t].copy() if d > 1 else np.zeros(0),
            ))
    return samples


def counterfactual_from_trajectory(coeffs: ScmCoefficients, config: ScmConfig,
                                   trajectory: Trajectory, a_bar: np.ndarray,
                                   y_noise: float) -> float:
    """Clamp the final d treatments of an observed trajectory to `a_bar`
    (oldest first), regenerate the covariates over those steps, and emit the
    final outcome using the supplied noise draw.

    With a_bar equal to the realized final treatments and the realized noise,
    this reproduces the observed final outcome exactly (consistency).
    """
    d, T = config.d, config.T
    a_bar = np.asarray(a_bar, dtype=np.float64)
    if len(a_bar) != d:
        raise ValueError(f"a_bar must have length d={d}")
    A = trajectory.a.astype(np.float64).copy()
    X = trajectory.x.astype(np.float64).copy()
    A[T - d:] = a_bar
    sc = config.static_covariate
    v = trajectory.v
    for t in range(T - d, T):
        if t == 0:
            continue  # X_0 is exogenous
        acc = coeffs.g0
        for k in range(1, d):
            acc += coeffs.gt[k - 1] * (A[t - k] if t - k >= 0 else 0.0)
            acc += coeffs.gx[k - 1] * (X[t - k] if t - k >= 0 else 0.0)
        if sc is not None and v is not None:
            acc += sc.coef_x * v
        X[t] = acc
    t = T - 1
    y = coeffs.a0 + y_noise
    for k in range(0, d):
        y += coeffs.at[k] * (A[t - k] if t - k >= 0 else 0.0)
        y += coeffs.ax[k] * (X[t - k] if t - k >= 0 else 0.0)
    if sc is not None and v is not None:
        y += sc.coef_y * v
    return float(y)


def sample_counterfactual(coeffs: ScmCoefficients, config: ScmConfig,
                          a_bar: np.ndarray, n: int, seed: int = 0,
                          prefix_mode: str = "fixed",
                          v: float | tuple[float, float] | None = None) -> np.ndarray:
    """Exact draws of Y(a_bar): per draw, simulate an observational prefix,
    clamp its final d treatments to `a_bar`, regenerate covariates, emit Y.

    prefix_mode "fixed" uses prefixes of length config.T; "uniform" draws the
    prefix length uniformly over the window times {d..T}, matching the
    population of pooled training windows. With a static covariate, `v` may
    fix a value, give a (low, high) subgroup interval, or default to the
    configured interval. Returns shape (n, 1).
    """
    coeffs.validate(config.d)
    d, T = config.d, config.T
    a_bar = np.asarray(a_bar, dtype=np.float64)
    if len(a_bar) != d:
        raise ValueError(f"a_bar must have length d={d}")
    if prefix_mode not in ("fixed", "uniform"):
        raise ValueError("prefix_mode must be 'fixed' or 'uniform'")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
    if prefix_mode == "fixed":
        lengths = np.full(n, T, dtype=int)
    else:
        lengths = rng.integers(d, T + 1, size=n)
    out = np.empty(n)
    sc = config.static_covariate
    for L in np.unique(lengths):
        m = lengths == L
        k = int(m.sum())
        x0 = rng.uniform(0.0, 1.0, size=k)
        a_uniforms = rng.uniform(size=(k, L))
        noise = np.zeros((k, L))
        noise[:, L - 1] = np.sqrt(coeffs.noise_variance) * rng.standard_normal(k)
        if sc is not None:
            if v is None:
                vs = rng.uniform(sc.low, sc.high, size=k)
            elif isinstance(v, tuple):
                vs = rng.uniform(v[0], v[1], size=k)
            else:
                vs = np.full(k, float(v))
        else:
            vs = None
        sub_cfg = ScmConfig(d=d, T=int(L), n_traj=max(k, 1), seed=config.seed,
                            beta0_override=config.beta0_override,
                            static_covariate=sc)
        _, _, Y, _ = _simulate_arrays(coeffs, sub_cfg, x0, a_uniforms, noise,
                                      vs, clamp_from=int(L) - d, a_bar=a_bar)
        out[m] = Y[:, L - 1]
    return out[:, None]


def all_combos(d: int) -> list[str]:
    """Treatment-combination labels, oldest first ('011' means the newest two
    treatments are 1)."""
    return [format(i, f"0{d}b") for i in range(2 ** d)]


def combo_to_array(label: str) -> np.ndarray:
    return np.array([float(c) for c in label])


def save_trajectories(path, trajectories: list[Trajectory], config: ScmConfig,
                      coeffs: ScmCoefficients, m: int = 1) -> None:
    """JSON-lines: a header line then one trajectory per line."""
    path = Path(path)
    header = {"d": config.d, "T": config.T, "m": m, "seed": config.seed,
              "coeffs": coeffs.to_dict()}
    with path.open("w") as fh:
        fh.write(json.dumps(header) + "\n")
        for i, traj in enumerate(trajectories):
            rec = {
                "i": i,
                "x": traj.x.tolist(),
                "a": [int(a) for a in traj.a],
                "y": traj.y.tolist(),
                "v": traj.v,
            }
            fh.write(json.dumps(rec) + "\n")


def load_trajectories(path):
    """Returns (trajectories, header_dict)."""
    path = Path(path)
    with path.open() as fh:
        header = json.loads(fh.readline())
        trajectories = []
        for line in fh:
            rec = json.loads(line)
            trajectories.append(Trajectory(
                x=np.asarray(rec["x"], dtype=np.float64),
                a=np.asarray(rec["a"], dtype=np.float64),
                y=np.asarray(rec["y"], dtype=np.float64),
                v=rec.get("v"),
            ))
    return trajectories, header

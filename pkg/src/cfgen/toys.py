"""Desk-scale toy processes used to verify the weighting machinery exactly.

Two toys:

* A discrete toy with finite supports everywhere, so the counterfactual pmf
  can be enumerated exactly (the executable form of the pseudo-population
  identity). Covariates are binary with a deterministic treatment-dependent
  transition table; the outcome lives on a small lattice.

* A bimodal "hotspot" toy with a 2-dimensional outcome: a Bernoulli mode
  indicator driven by the covariate window picks which entry is elevated,
  while a treatment-dependent base level shifts both entries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scm import ScmConfig, Trajectory, stable_sigmoid

__all__ = [
    "DiscreteToySpec",
    "simulate_discrete_toy",
    "enumerate_counterfactual_discrete",
    "PathBudgetError",
    "BimodalToyParams",
    "simulate_bimodal_toy",
    "sample_bimodal_counterfactual",
    "bimodal_mode_proportion",
    "hotspot_labels",
]


class PathBudgetError(RuntimeError):
    """Exhaustive enumeration would exceed the configured path budget."""


@dataclass(frozen=True)
class DiscreteToySpec:
    """Finite-support toy with window length d=2.

    Covariate transition is the deterministic table
    ``x_next[a_prev][x_prev]``; the propensity is
    sigmoid(b0 + b_a * A_{t-1} + b_x * X_t); the outcome is
    ``c0 + c_a1 A_{t-1} + c_a0 A_t + c_x1 X_{t-1} + c_x0 X_t + eps`` with
    eps on {-noise_step, 0, +noise_step}.
    """

    T: int = 20
    x0_support: tuple[float, ...] = (0.0, 1.0)
    x0_probs: tuple[float, ...] = (0.5, 0.5)
    # default: a=0 keeps X, a=1 flips it (treatment-dependent covariates)
    x_table: tuple[tuple[float, float], tuple[float, float]] = ((0.0, 1.0), (1.0, 0.0))
    b0: float = -0.3
    b_a: float = 0.6
    b_x: float = -0.8
    c0: float = 0.0
    c_a1: float = 1.0
    c_a0: float = 1.0
    c_x1: float = 1.0
    c_x0: float = 1.0
    noise_step: float = 1.0
    noise_prob: float = 0.25  # P(eps = -step) = P(eps = +step)
    path_budget: int = 2_000_000

    @property
    def d(self) -> int:
        return 2

    def propensity(self, a_prev, x_cur):
        return stable_sigmoid(self.b0 + self.b_a * np.asarray(a_prev)
                              + self.b_x * np.asarray(x_cur))

    def x_next(self, a_prev, x_prev):
        table = np.asarray(self.x_table)
        return table[np.asarray(a_prev, dtype=int), np.asarray(x_prev, dtype=int)]

    def outcome_base(self, a_prev, a_cur, x_prev, x_cur):
        return (self.c0 + self.c_a1 * a_prev + self.c_a0 * a_cur
                + self.c_x1 * x_prev + self.c_x0 * x_cur)

    def noise_pmf(self):
        q = self.noise_prob
        return np.array([-self.noise_step, 0.0, self.noise_step]), np.array([q, 1 - 2 * q, q])


def simulate_discrete_toy(spec: DiscreteToySpec, n: int, seed: int = 0) -> dict:
    """Simulate n trajectories and keep only the final window of each, with
    the exact oracle IPTW computed from the full trajectory.

    Returns arrays: y (n,), a_window (n, 2), x_window (n, 2), weight (n,).
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
    T = spec.T
    x0_vals = np.asarray(spec.x0_support)
    x0_probs = np.asarray(spec.x0_probs)
    X = np.empty((n, T))
    A = np.empty((n, T))
    P = np.empty((n, T))
    X[:, 0] = x0_vals[rng.choice(len(x0_vals), size=n, p=x0_probs)]
    for t in range(T):
        if t > 0:
            X[:, t] = spec.x_next(A[:, t - 1], X[:, t - 1])
        a_prev = A[:, t - 1] if t > 0 else np.zeros(n)
        P[:, t] = spec.propensity(a_prev, X[:, t])
        A[:, t] = rng.uniform(size=n) < P[:, t]
    noise_vals, noise_probs = spec.noise_pmf()
    eps = noise_vals[rng.choice(3, size=n, p=noise_probs)]
    y = spec.outcome_base(A[:, T - 2], A[:, T - 1], X[:, T - 2], X[:, T - 1]) + eps
    # exact subject-specific IPTW over the two window steps
    fac1 = np.where(A[:, T - 2] > 0.5, P[:, T - 2], 1 - P[:, T - 2])
    fac2 = np.where(A[:, T - 1] > 0.5, P[:, T - 1], 1 - P[:, T - 1])
    weight = 1.0 / (fac1 * fac2)
    return {
        "y": y,
        "a_window": A[:, T - 2:].copy(),
        "x_window": X[:, T - 2:].copy(),
        "weight": weight,
    }


def enumerate_counterfactual_discrete(spec: DiscreteToySpec,
                                      a_bar) -> tuple[np.ndarray, np.ndarray]:
    """Exact g-formula counterfactual pmf at the final time by summing the
    toy dynamics over every (X_0, free-treatment) path with the final window
    clamped to `a_bar`. Returns (sorted outcome values, probabilities)."""
    a_bar = np.asarray(a_bar, dtype=np.float64)
    d, T = spec.d, spec.T
    if len(a_bar) != d:
        raise ValueError(f"a_bar must have length {d}")
    n_free = T - d
    n_paths = len(spec.x0_support) * 2 ** n_free
    if n_paths > spec.path_budget:
        raise PathBudgetError(
            f"{n_paths} paths exceed the budget of {spec.path_budget}")

    k0 = len(spec.x0_support)
    # path index = x0 choice * 2^n_free + treatment bits (bit t = A_t)
    bits = np.arange(2 ** n_free, dtype=np.int64)
    x = np.repeat(np.asarray(spec.x0_support), 2 ** n_free)
    prob = np.repeat(np.asarray(spec.x0_probs), 2 ** n_free).astype(np.float64)
    bits = np.tile(bits, k0)

    a_prev = np.zeros(len(x))
    x_prev = np.zeros(len(x))
    for t in range(T):
        if t > 0:
            x_prev, x = x, spec.x_next(a_prev, x)
        if t < n_free:
            a_t = ((bits >> t) & 1).astype(np.float64)
            p = spec.propensity(a_prev, x)
            prob *= np.where(a_t > 0.5, p, 1 - p)
        else:
            a_t = np.full(len(x), a_bar[t - n_free])
        a_prev = a_t
    base = spec.outcome_base(a_bar[0], a_bar[1], x_prev, x)
    noise_vals, noise_probs = spec.noise_pmf()
    pmf: dict[float, float] = {}
    for nv, npb in zip(noise_vals, noise_probs):
        vals = np.round(base + nv, 9)
        for v in np.unique(vals):
            pmf[v] = pmf.get(v, 0.0) + prob[vals == v].sum() * npb
    values = np.array(sorted(pmf))
    probs = np.array([pmf[v] for v in values])
    return values, probs


def sample_discrete_counterfactual(spec: DiscreteToySpec, a_bar, n: int,
                                   seed: int = 0) -> np.ndarray:
    """Monte Carlo counterfactual draws: simulate the observational prefix,
    clamp the final window to `a_bar`, emit the outcome."""
    a_bar = np.asarray(a_bar, dtype=np.float64)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
    T, d = spec.T, spec.d
    x0_vals = np.asarray(spec.x0_support)
    X = np.empty((n, T))
    A = np.empty((n, T))
    X[:, 0] = x0_vals[rng.choice(len(x0_vals), size=n, p=np.asarray(spec.x0_probs))]
    for t in range(T):
        if t > 0:
            X[:, t] = spec.x_next(A[:, t - 1], X[:, t - 1])
        if t >= T - d:
            A[:, t] = a_bar[t - (T - d)]
        else:
            a_prev = A[:, t - 1] if t > 0 else np.zeros(n)
            A[:, t] = rng.uniform(size=n) < spec.propensity(a_prev, X[:, t])
    noise_vals, noise_probs = spec.noise_pmf()
    eps = noise_vals[rng.choice(3, size=n, p=noise_probs)]
    return spec.outcome_base(A[:, T - 2], A[:, T - 1], X[:, T - 2], X[:, T - 1]) + eps


def empirical_pmf(y: np.ndarray, weights: np.ndarray,
                  support: np.ndarray) -> np.ndarray:
    """Weighted empirical pmf of lattice-valued y on the given support."""
    y = np.round(np.asarray(y), 9)
    w = np.asarray(weights, dtype=np.float64)
    probs = np.array([w[y == v].sum() for v in support])
    total = w.sum()
    return probs / total if total > 0 else probs


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


@dataclass(frozen=True)
class BimodalToyParams:
    """Hotspot toy (m=2, d=3). Covariate/treatment dynamics are a stable
    linear recursion; the outcome is base + elevation * e_mode + jitter."""

    # covariate recursion X_t = g0 + gt.(lags of A) + gx.(lags of X)
    g0: float = -0.4
    gt: tuple[float, float] = (0.6, 0.3)
    gx: tuple[float, float] = (0.4, 0.2)
    # propensity logit = b0 + bt.(lags of A) + bx.(X_t, X_{t-1}, X_{t-2})
    b0: float = -0.2
    bt: tuple[float, float] = (0.4, -0.2)
    bx: tuple[float, float, float] = (1.4, 0.7, 0.3)
    # mode probability = sigmoid(m0 + mx.(X_t, X_{t-1}, X_{t-2}))
    m0: float = -0.6
    mx: tuple[float, float, float] = (2.5, 1.2, 0.6)
    mode_prob_const: float | None = None  # overrides the logistic when set
    # outcome: base = base0 + base_t.(A_{t-2}, A_{t-1}, A_t) (oldest first)
    base0: float = 0.45
    base_t: tuple[float, float, float] = (-0.2, -0.15, -0.1)
    elevation: float = 1.0
    jitter_std: float = 0.05

    @property
    def d(self) -> int:
        return 3


def _bimodal_xa(params: BimodalToyParams, config: ScmConfig, n: int, T: int,
                rng: np.random.Generator,
                clamp_from: int | None = None, a_bar=None):
    d = 3
    gt = np.asarray(params.gt)
    gx = np.asarray(params.gx)
    bt = np.asarray(params.bt)
    bx = np.asarray(params.bx)
    b0 = params.b0 if config.beta0_override is None else float(config.beta0_override)
    X = np.zeros((n, T))
    A = np.zeros((n, T))
    X[:, 0] = rng.uniform(0.0, 1.0, size=n)
    a_uniforms = rng.uniform(size=(n, T))

    def lag(M, t, k):
        return M[:, t - k] if t - k >= 0 else np.zeros(n)

    for t in range(T):
        if t > 0:
            X[:, t] = (params.g0
                       + sum(gt[k - 1] * lag(A, t, k) for k in range(1, d))
                       + sum(gx[k - 1] * lag(X, t, k) for k in range(1, d)))
        if clamp_from is not None and t >= clamp_from:
            A[:, t] = a_bar[t - clamp_from]
        else:
            logit = (b0 + sum(bt[k - 1] * lag(A, t, k) for k in range(1, d))
                     + sum(bx[k] * lag(X, t, k) for k in range(d)))
            A[:, t] = a_uniforms[:, t] < stable_sigmoid(logit)
    return X, A


def _lag_cols(M: np.ndarray, t: int, lags) -> np.ndarray:
    """Columns M[:, t-k] for k in lags, zero where t-k < 0."""
    n = M.shape[0]
    return np.column_stack(
        [M[:, t - k] if t - k >= 0 else np.zeros(n) for k in lags])


def _bimodal_outcome_at(params: BimodalToyParams, X: np.ndarray, A: np.ndarray,
                        t: int, rng: np.random.Generator) -> np.ndarray:
    """Draw the (n, 2) outcome at time t (lags zero-padded below t=0)."""
    n = X.shape[0]
    x_lags = _lag_cols(X, t, range(3))          # X_t, X_{t-1}, X_{t-2}
    a_lags = _lag_cols(A, t, (2, 1, 0))         # A_{t-2}, A_{t-1}, A_t
    if params.mode_prob_const is not None:
        p_mode = np.full(n, params.mode_prob_const)
    else:
        p_mode = stable_sigmoid(params.m0 + x_lags @ np.asarray(params.mx))
    mode = rng.uniform(size=n) < p_mode  # True -> entry 0 elevated
    base = params.base0 + a_lags @ np.asarray(params.base_t)
    y = base[:, None] + params.jitter_std * rng.standard_normal((n, 2))
    y[np.arange(n), np.where(mode, 0, 1)] += params.elevation
    return y


def simulate_bimodal_toy(config: ScmConfig,
                         params: BimodalToyParams | None = None) -> list[Trajectory]:
    """Observational hotspot-toy trajectories with m=2 outcomes."""
    if config.d != 3:
        raise ValueError("the bimodal toy is defined for d=3")
    params = params or BimodalToyParams()
    T, n = config.T, config.n_traj
    trajectories = []
    for i in range(n):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=config.seed, spawn_key=(i,)))
        X, A = _bimodal_xa(params, config, 1, T, rng)
        y = np.zeros((T, 2))
        for t in range(T):
            y[t] = _bimodal_outcome_at(params, X, A, t, rng)[0]
        trajectories.append(Trajectory(x=X[0].copy(), a=A[0].copy(), y=y))
    return trajectories


def sample_bimodal_counterfactual(config: ScmConfig, a_bar, n: int, seed: int = 0,
                                  params: BimodalToyParams | None = None,
                                  prefix_mode: str = "uniform") -> np.ndarray:
    """Counterfactual (n, 2) outcomes via the clamping oracle."""
    params = params or BimodalToyParams()
    a_bar = np.asarray(a_bar, dtype=np.float64)
    d, T = 3, config.T
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
    if prefix_mode == "fixed":
        lengths = np.full(n, T, dtype=int)
    else:
        lengths = rng.integers(d, T + 1, size=n)
    out = np.empty((n, 2))
    for L in np.unique(lengths):
        m = lengths == L
        k = int(m.sum())
        X, A = _bimodal_xa(params, config, k, int(L), rng,
                           clamp_from=int(L) - d, a_bar=a_bar)
        out[m] = _bimodal_outcome_at(params, X, A, int(L) - 1, rng)
    return out


def hotspot_labels(y: np.ndarray) -> np.ndarray:
    """Index of the maximal entry per sample (the hotspot projector)."""
    return np.argmax(np.asarray(y), axis=1)


def bimodal_mode_proportion(y: np.ndarray) -> float:
    """Fraction of samples whose hotspot is entry 0."""
    return float(np.mean(hotspot_labels(y) == 0))

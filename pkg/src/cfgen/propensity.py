"""Per-step treatment propensities and stabilized subject-specific IPTW.

The propensity network maps a 2d-dimensional encoding of one window step —
its d treatment lags (newest first) and d covariate lags including the
current covariate (newest first), plus the static covariate when present —
to P(a_step = 1 | history). Lags reach into the pre-window context carried by
each WindowSample and are zero only where the trajectory itself had no
history. The subject-specific weight is the product over the d window steps
of the inverse probability of the realized treatment.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .nn import AdamState, Mlp, TrainConfig, adam_step, minibatches
from .scm import ScmCoefficients, WindowSample, stable_sigmoid

__all__ = [
    "WeightConfig",
    "PropensityModel",
    "step_encoding",
    "fit_propensity",
    "compute_iptw",
    "compute_iptw_batch",
    "oracle_iptw",
    "oracle_iptw_batch",
    "stabilize_weights",
    "bce_loss_graph",
]


@dataclass(frozen=True)
class WeightConfig:
    lower_percentile: float = 0.01
    upper_percentile: float = 99.99
    normalize_by_mean: bool = True

    def __post_init__(self):
        if not (0.0 <= self.lower_percentile < self.upper_percentile <= 100.0):
            raise ValueError("need 0 <= lower < upper <= 100")


@dataclass
class PropensityModel:
    net: Mlp
    d: int
    with_v: bool = False


def _extended_arrays(samples: list[WindowSample], d: int):
    """Stack (a_context + a_window) and (x_context + x_window) per sample."""
    n = len(samples)
    ext_a = np.zeros((n, 2 * d))
    ext_x = np.zeros((n, 2 * d - 1))
    for i, s in enumerate(samples):
        ext_a[i, d:] = s.a_window
        ext_x[i, d - 1:] = s.x_window
        if s.a_context is not None:
            ext_a[i, :d] = s.a_context
        if d > 1 and s.x_context is not None:
            ext_x[i, :d - 1] = s.x_context
    return ext_a, ext_x


def step_encoding(ext_a: np.ndarray, ext_x: np.ndarray, d: int, p: int,
                  v: np.ndarray | None = None) -> np.ndarray:
    """Encoding of window step p: treatment lags 1..d then covariate lags
    0..d-1, both newest first."""
    pos_a = d + p
    pos_x = d - 1 + p
    cols = [ext_a[:, pos_a - k] for k in range(1, d + 1)]
    cols += [ext_x[:, pos_x - k] for k in range(0, d)]
    if v is not None:
        cols.append(v)
    return np.column_stack(cols)


def bce_loss_graph(net: Mlp, params, inputs: np.ndarray, labels: np.ndarray):
    """Mean binary cross-entropy of the realized treatments."""
    p = net.apply(inputs, params)
    t = ad.Var(labels[:, None])
    nll = -(t * ad.log(p) + (1.0 - t) * ad.log(1.0 - p))
    return ad.vmean(nll)


def fit_propensity(samples: list[WindowSample], train_cfg: TrainConfig | None = None,
                   hidden: tuple[int, ...] = (64, 64),
                   max_rows: int = 500_000) -> PropensityModel:
    """Fit the per-step conditional by pooled binary cross-entropy over every
    window position of every sample. Deterministic given train_cfg.seed."""
    if not samples:
        raise ValueError("no samples to fit on")
    cfg = train_cfg or TrainConfig(epochs=6, batch_size=256, lr=1e-3, seed=0)
    d = len(samples[0].a_window)
    with_v = samples[0].v is not None
    ext_a, ext_x = _extended_arrays(samples, d)
    v = np.array([s.v for s in samples]) if with_v else None
    rows = np.concatenate([step_encoding(ext_a, ext_x, d, p, v) for p in range(d)])
    labels = np.concatenate([ext_a[:, d + p] for p in range(d)])

    if labels.min() == labels.max():
        warnings.warn("propensity labels are single-class; the fitted model "
                      "will sit at the clamp boundary", RuntimeWarning)

    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed,
                                                       spawn_key=(0xA11CE,)))
    if len(rows) > max_rows:
        keep = rng.choice(len(rows), size=max_rows, replace=False)
        rows, labels = rows[keep], labels[keep]

    net = Mlp.create([rows.shape[1], *hidden, 1], rng,
                     hidden_activation="relu", output_activation="sigmoid")
    params = net.params
    state = AdamState.for_params(params, lr=cfg.lr)
    n = len(rows)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        for idx in minibatches(n, cfg.batch_size, rng):
            _, grads = ad.value_and_grad(
                lambda pv: bce_loss_graph(net, pv, rows[idx], labels[idx]), params)
            params, state = adam_step(state, params, grads, lr=lr)
    net.set_params(params)
    net.assert_finite()
    return PropensityModel(net=net, d=d, with_v=with_v)


def _step_probabilities(model: PropensityModel, samples: list[WindowSample]):
    """(n, d) matrix of fitted P(a_p = 1 | history) per window step."""
    d = model.d
    ext_a, ext_x = _extended_arrays(samples, d)
    v = np.array([s.v for s in samples]) if model.with_v else None
    probs = np.empty((len(samples), d))
    for p in range(d):
        probs[:, p] = model.net.forward(step_encoding(ext_a, ext_x, d, p, v))[:, 0]
    return probs, ext_a


def compute_iptw_batch(model: PropensityModel,
                       samples: list[WindowSample]) -> np.ndarray:
    probs, ext_a = _step_probabilities(model, samples)
    realized = ext_a[:, model.d:]
    factors = np.where(realized > 0.5, probs, 1.0 - probs)
    return 1.0 / np.prod(factors, axis=1)


def compute_iptw(model: PropensityModel, sample: WindowSample) -> float:
    """Subject-specific IPTW for one sample; finite by the sigmoid clamp."""
    return float(compute_iptw_batch(model, [sample])[0])


def oracle_iptw_batch(coeffs: ScmCoefficients, samples: list[WindowSample],
                      beta0_override: float | None = None,
                      v_coef: float = 0.0) -> np.ndarray:
    """True-propensity weights from the data-generating logistic form."""
    d = coeffs.d
    ext_a, ext_x = _extended_arrays(samples, d)
    b0 = coeffs.b0 if beta0_override is None else float(beta0_override)
    weights = np.ones(len(samples))
    v = np.array([s.v if s.v is not None else 0.0 for s in samples])
    for p in range(d):
        pos_a, pos_x = d + p, d - 1 + p
        logit = np.full(len(samples), b0)
        for k in range(1, d):
            logit += coeffs.bt[k - 1] * ext_a[:, pos_a - k]
        for k in range(0, d):
            logit += coeffs.bx[k] * ext_x[:, pos_x - k]
        logit += v_coef * v
        prob = stable_sigmoid(logit)
        realized = ext_a[:, pos_a]
        weights /= np.where(realized > 0.5, prob, 1.0 - prob)
    return weights


def oracle_iptw(coeffs: ScmCoefficients, sample: WindowSample,
                beta0_override: float | None = None,
                v_coef: float = 0.0) -> float:
    return float(oracle_iptw_batch(coeffs, [sample], beta0_override, v_coef)[0])


def stabilize_weights(weights, cfg: WeightConfig | None = None) -> np.ndarray:
    """Truncate at the configured percentiles of the empirical weight
    distribution, then normalize by the post-truncation mean.

    Percentiles are the outward order statistics ("lower" below, "higher"
    above); unlike interpolated percentiles this makes truncation exactly
    idempotent up to the mean renormalization.
    """
    cfg = cfg or WeightConfig()
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        raise ValueError("empty weight vector")
    if np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be positive and finite")
    lo = np.percentile(w, cfg.lower_percentile, method="lower")
    hi = np.percentile(w, cfg.upper_percentile, method="higher")
    out = np.clip(w, lo, hi)
    if cfg.normalize_by_mean:
        out = out / out.mean()
    return out

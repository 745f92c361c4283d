"""IPTW-weighted conditional generative models.

Both generators maximize the weighted per-sample bound
``(1/N) sum_i w_i * bound(y_i | a_bar_i)`` by minibatch Adam, with the
weights fixed multipliers computed once from the propensity model:

* the CVAE bound is the reparameterized ELBO
  ``-KL(q(z|y,a) || p(z|a)) + log N(y; decoder(z, a), sigma^2 I)``;
* the diffusion bound is the negative noise-prediction error
  ``-||eps - eps_theta(sqrt(lam_bar_s) y + sqrt(1-lam_bar_s) eps, s, a)||^2``
  with the condition dropped at rate p_uncond for classifier-free guidance.

Sampling: the CVAE decodes a prior draw; the diffusion model runs ancestral
denoising with the guided score (w+1)*eps_cond - w*eps_uncond.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import TrainingError, Var
from .nn import AdamState, Mlp, TrainConfig, adam_step, minibatches
from .scm import WindowSample

__all__ = [
    "CvaeModel",
    "NoiseSchedule",
    "DiffusionModel",
    "GeneratorSpec",
    "GENERATOR_KINDS",
    "cvae_elbo",
    "gaussian_kl",
    "cvae_generate",
    "forward_noise",
    "diffusion_loss",
    "guided_noise",
    "diffusion_sample",
    "train_generator",
    "stack_windows",
    "save_generator",
    "load_generator",
]

GENERATOR_KINDS = ("mscvae", "msdiffusion", "cvae_unweighted", "diffusion_unweighted")
_KIND_ALIASES = {"cvae": "cvae_unweighted", "diffusion": "diffusion_unweighted"}

TIME_EMBED_FREQS = (1.0, 2.0, 4.0, 8.0)


def stack_windows(samples: list[WindowSample]):
    """Columnar view: y (n, m), cond (n, d [+1 with v])."""
    y = np.stack([s.y for s in samples])
    cond = np.stack([s.a_window for s in samples])
    if samples[0].v is not None:
        cond = np.column_stack([cond, [s.v for s in samples]])
    return y, cond


@dataclass
class GeneratorSpec:
    kind: str
    d: int
    m: int = 1
    r: int | None = None          # latent dim; default 5, or 10 for d=5 / m>=2
    hidden: tuple[int, ...] = (64, 64)
    decoder_variance: float = 0.01
    generation_noise: bool = True
    diffusion_steps: int = 200
    guidance_w: float = 2.0
    p_uncond: float = 0.1
    with_v: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        self.kind = _KIND_ALIASES.get(self.kind, self.kind)
        if self.kind not in GENERATOR_KINDS:
            raise ValueError(f"unknown generator kind {self.kind!r}")
        if self.r is None:
            self.r = 10 if (self.d >= 5 or self.m >= 2) else 5

    @property
    def weighted(self) -> bool:
        return self.kind in ("mscvae", "msdiffusion")

    @property
    def family(self) -> str:
        return "cvae" if "cvae" in self.kind else "diffusion"


# ---------------------------------------------------------------------------
# CVAE


@dataclass
class CvaeModel:
    encoder: Mlp   # (m + cond) -> 2r
    prior: Mlp     # cond -> 2r
    decoder: Mlp   # (r + cond) -> m
    r: int
    m: int
    d: int
    decoder_variance: float = 0.01
    with_v: bool = False
    generation_noise: bool = True
    loss_trace: list[float] = field(default_factory=list)

    @property
    def cond_dim(self) -> int:
        return self.d + (1 if self.with_v else 0)

    @classmethod
    def create(cls, spec: GeneratorSpec, rng: np.random.Generator) -> "CvaeModel":
        cond = spec.d + (1 if spec.with_v else 0)
        enc = Mlp.create([spec.m + cond, *spec.hidden, 2 * spec.r], rng)
        pri = Mlp.create([cond, *spec.hidden, 2 * spec.r], rng)
        dec = Mlp.create([spec.r + cond, *spec.hidden, spec.m], rng)
        return cls(encoder=enc, prior=pri, decoder=dec, r=spec.r, m=spec.m,
                   d=spec.d, decoder_variance=spec.decoder_variance,
                   with_v=spec.with_v, generation_noise=spec.generation_noise)

    @property
    def params(self) -> list[np.ndarray]:
        return self.encoder.params + self.prior.params + self.decoder.params

    def set_params(self, params: list[np.ndarray]) -> None:
        ne, np_, _ = (len(self.encoder.params), len(self.prior.params),
                      len(self.decoder.params))
        self.encoder.set_params(params[:ne])
        self.prior.set_params(params[ne:ne + np_])
        self.decoder.set_params(params[ne + np_:])

    def _split_param_vars(self, pv):
        if pv is None:
            return None, None, None
        ne, np_ = len(self.encoder.params), len(self.prior.params)
        return pv[:ne], pv[ne:ne + np_], pv[ne + np_:]


def gaussian_kl(mu_q: np.ndarray, logvar_q: np.ndarray,
                mu_p: np.ndarray, logvar_p: np.ndarray) -> np.ndarray:
    """Per-sample KL between diagonal Gaussians, in a form that is
    non-negative term by term in floating point."""
    delta = logvar_q - logvar_p
    quad = (mu_q - mu_p) ** 2 * np.exp(-logvar_p)
    return 0.5 * np.sum(np.expm1(delta) - delta + quad, axis=-1)


def _elbo_graph(model: CvaeModel, pv, y: np.ndarray, cond: np.ndarray,
                eps: np.ndarray):
    """Per-sample ELBO as a (n,) Var."""
    enc_pv, pri_pv, dec_pv = model._split_param_vars(pv)
    r = model.r
    enc_out = model.encoder.apply(np.concatenate([y, cond], axis=1), enc_pv)
    pri_out = model.prior.apply(cond, pri_pv)
    mu_q = ad.narrow(enc_out, 0, r)
    lv_q = ad.narrow(enc_out, r, 2 * r)
    mu_p = ad.narrow(pri_out, 0, r)
    lv_p = ad.narrow(pri_out, r, 2 * r)
    # reparameterization: z = mu + sigma * eps
    z = mu_q + ad.exp(lv_q * 0.5) * Var(eps)
    dec_out = model.decoder.apply(ad.concat([z, Var(cond)]), dec_pv)
    var = model.decoder_variance
    recon = (-0.5 * model.m * np.log(2.0 * np.pi * var)
             - ad.vsum(ad.square(dec_out - Var(y)), axis=1) * (0.5 / var))
    delta = lv_q - lv_p
    kl = ad.vsum(ad.exp(delta) - delta - 1.0
                 + ad.square(mu_q - mu_p) * ad.exp(-lv_p), axis=1) * 0.5
    return recon - kl


def cvae_elbo(model: CvaeModel, y, a_bar, noise, v: float | None = None) -> float:
    """Single-sample ELBO with an explicit reparameterization noise vector."""
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))[None, :]
    cond = np.asarray(a_bar, dtype=np.float64)
    if model.with_v:
        cond = np.append(cond, 0.0 if v is None else float(v))
    cond = cond[None, :]
    eps = np.asarray(noise, dtype=np.float64)[None, :]
    val = _elbo_graph(model, None, y, cond, eps)
    out = float(val.value[0])
    if not np.isfinite(out):
        raise TrainingError("non-finite ELBO")
    return out


def cvae_generate(model: CvaeModel, a_bar, n: int, seed: int = 0,
                  v: float | None = None) -> np.ndarray:
    """Sample y = decoder(z, a) with z from the prior net; adds decoder noise
    when the model was configured with generation_noise."""
    if n == 0:
        return np.zeros((0, model.m))
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
    cond = np.asarray(a_bar, dtype=np.float64)
    if model.with_v:
        cond = np.append(cond, 0.0 if v is None else float(v))
    cond_rows = np.tile(cond, (n, 1))
    pri_out = model.prior.forward(cond_rows)
    mu_p, lv_p = pri_out[:, :model.r], pri_out[:, model.r:]
    z = mu_p + np.exp(0.5 * lv_p) * rng.standard_normal((n, model.r))
    y = model.decoder.forward(np.concatenate([z, cond_rows], axis=1))
    if model.generation_noise:
        y = y + np.sqrt(model.decoder_variance) * rng.standard_normal((n, model.m))
    return y


# ---------------------------------------------------------------------------
# Guided diffusion


@dataclass(frozen=True)
class NoiseSchedule:
    gammas: np.ndarray  # per-step noise variances, s = 1..S

    def __post_init__(self):
        g = np.asarray(self.gammas, dtype=np.float64)
        if np.any(g <= 0) or np.any(g >= 1):
            raise ValueError("noise variances must lie in (0, 1)")
        object.__setattr__(self, "gammas", g)

    @classmethod
    def linear(cls, steps: int = 200, gamma_min: float = 1e-4,
               gamma_max: float = 0.1) -> "NoiseSchedule":
        """Linear variances chosen so the terminal signal fraction
        lambda_bar_S is negligible (~3e-5 at the defaults); sampling starts
        from N(0, I), so a non-vanishing terminal signal would bias it."""
        return cls(np.linspace(gamma_min, gamma_max, steps))

    @property
    def S(self) -> int:
        return len(self.gammas)

    @property
    def lambdas(self) -> np.ndarray:
        return 1.0 - self.gammas

    @property
    def lambda_bars(self) -> np.ndarray:
        return np.cumprod(self.lambdas)


def forward_noise(y0: np.ndarray, s: int, schedule: NoiseSchedule,
                  noise: np.ndarray) -> np.ndarray:
    """y_s = sqrt(lam_bar_s) y0 + sqrt(1 - lam_bar_s) noise, s in 1..S."""
    if not (1 <= s <= schedule.S):
        raise ValueError(f"step {s} outside 1..{schedule.S}")
    lb = schedule.lambda_bars[s - 1]
    return np.sqrt(lb) * np.asarray(y0) + np.sqrt(1.0 - lb) * np.asarray(noise)


def time_features(s: np.ndarray, S: int) -> np.ndarray:
    """Normalized step plus a small sinusoidal embedding (dimension 8)."""
    u = np.asarray(s, dtype=np.float64)[:, None] / S
    feats = [u]
    for f in TIME_EMBED_FREQS:
        feats.append(np.sin(np.pi * f * u))
        feats.append(np.cos(np.pi * f * u))
    return np.concatenate(feats, axis=1)


TIME_DIM = 1 + 2 * len(TIME_EMBED_FREQS)


@dataclass
class DiffusionModel:
    net: Mlp                 # (m + cond + TIME_DIM) -> m
    null_cond: np.ndarray    # learned unconditional embedding, shape (cond,)
    schedule: NoiseSchedule
    m: int
    d: int
    guidance_w: float = 2.0
    p_uncond: float = 0.1
    with_v: bool = False
    loss_trace: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.guidance_w < 0:
            raise ValueError("guidance_w must be >= 0")
        if not (0.0 <= self.p_uncond < 1.0):
            raise ValueError("p_uncond must be in [0, 1)")

    @property
    def cond_dim(self) -> int:
        return self.d + (1 if self.with_v else 0)

    @classmethod
    def create(cls, spec: GeneratorSpec, rng: np.random.Generator) -> "DiffusionModel":
        cond = spec.d + (1 if spec.with_v else 0)
        net = Mlp.create([spec.m + cond + TIME_DIM, *spec.hidden, spec.m], rng,
                         hidden_activation="gelu")
        null_cond = 0.1 * rng.standard_normal(cond)
        return cls(net=net, null_cond=null_cond,
                   schedule=NoiseSchedule.linear(spec.diffusion_steps),
                   m=spec.m, d=spec.d, guidance_w=spec.guidance_w,
                   p_uncond=spec.p_uncond, with_v=spec.with_v)

    @property
    def params(self) -> list[np.ndarray]:
        return self.net.params + [self.null_cond]

    def set_params(self, params: list[np.ndarray]) -> None:
        self.net.set_params(params[:-1])
        self.null_cond = np.asarray(params[-1], dtype=np.float64)

    def predict_noise(self, y_s: np.ndarray, s: int, cond: np.ndarray | None) -> np.ndarray:
        """eps_theta; cond=None uses the learned null embedding."""
        n = y_s.shape[0]
        if cond is None:
            cond_rows = np.tile(self.null_cond, (n, 1))
        else:
            cond_rows = np.broadcast_to(np.asarray(cond, dtype=np.float64),
                                        (n, self.cond_dim))
        tf = np.broadcast_to(time_features(np.array([s]), self.schedule.S), (n, TIME_DIM))
        return self.net.forward(np.concatenate([y_s, cond_rows, tf], axis=1))


def _diffusion_loss_graph(model: DiffusionModel, pv, y: np.ndarray,
                          cond: np.ndarray, s_idx: np.ndarray,
                          eps: np.ndarray, uncond_mask: np.ndarray):
    """Per-sample noise-prediction error as a (n,) Var."""
    lb = model.schedule.lambda_bars[s_idx - 1][:, None]
    y_s = np.sqrt(lb) * y + np.sqrt(1.0 - lb) * eps
    tf = time_features(s_idx, model.schedule.S)
    net_pv, null_var = (pv[:-1], pv[-1]) if pv is not None else (None, Var(model.null_cond))
    mask = uncond_mask[:, None].astype(np.float64)
    cond_used = Var(cond * (1.0 - mask)) + null_var * Var(mask)
    net_in = ad.concat([Var(y_s), cond_used, Var(tf)])
    pred = model.net.apply(net_in, net_pv)
    return ad.vsum(ad.square(pred - Var(eps)), axis=1)


def diffusion_loss(model: DiffusionModel, y, a_bar, rng: np.random.Generator,
                   v: float | None = None) -> float:
    """Draw s ~ U{1..S} and eps ~ N(0, I); with probability p_uncond replace
    the condition by the null embedding; return the squared prediction error."""
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))[None, :]
    cond = np.asarray(a_bar, dtype=np.float64)
    if model.with_v:
        cond = np.append(cond, 0.0 if v is None else float(v))
    cond = cond[None, :]
    s_idx = rng.integers(1, model.schedule.S + 1, size=1)
    eps = rng.standard_normal((1, model.m))
    uncond = rng.uniform(size=1) < model.p_uncond
    val = _diffusion_loss_graph(model, None, y, cond, s_idx, eps, uncond)
    out = float(val.value[0])
    if not np.isfinite(out):
        raise TrainingError("non-finite diffusion loss")
    return out


def guided_noise(model: DiffusionModel, y_s: np.ndarray, s: int,
                 cond: np.ndarray) -> np.ndarray:
    """Classifier-free guided score: (w+1) eps_cond - w eps_uncond."""
    w = model.guidance_w
    eps_c = model.predict_noise(y_s, s, cond)
    if w == 0.0:
        return eps_c
    eps_u = model.predict_noise(y_s, s, None)
    return (w + 1.0) * eps_c - w * eps_u


def diffusion_sample(model: DiffusionModel, a_bar, n: int, seed: int = 0,
                     v: float | None = None) -> np.ndarray:
    """Ancestral sampling from y_S ~ N(0, I) down to y_0, using the guided
    score in the posterior mean and gamma_s-variance noise for s > 1."""
    if n == 0:
        return np.zeros((0, model.m))
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
    cond = np.asarray(a_bar, dtype=np.float64)
    if model.with_v:
        cond = np.append(cond, 0.0 if v is None else float(v))
    gammas = model.schedule.gammas
    lams = model.schedule.lambdas
    lam_bars = model.schedule.lambda_bars
    y = rng.standard_normal((n, model.m))
    for s in range(model.schedule.S, 0, -1):
        ebar = guided_noise(model, y, s, cond)
        g, lam, lb = gammas[s - 1], lams[s - 1], lam_bars[s - 1]
        y = (y - g / np.sqrt(1.0 - lb) * ebar) / np.sqrt(lam)
        if s > 1:
            y = y + np.sqrt(g) * rng.standard_normal((n, model.m))
    return y


# ---------------------------------------------------------------------------
# Algorithm-1 training loop


def train_generator(spec: GeneratorSpec, samples: list[WindowSample],
                    weights: np.ndarray | None = None):
    """Fit a conditional generator by weighted minibatch Adam.

    Unweighted kinds force all weights to one. The batch loss is the weighted
    mean of per-sample bounds divided by the global mean weight, so scaling
    every weight by a constant leaves the optimization trajectory unchanged.
    """
    if not samples:
        raise ValueError("no training samples")
    y, cond = stack_windows(samples)
    n = len(samples)
    if spec.weighted:
        if weights is None:
            raise ValueError(f"{spec.kind} requires IPTW weights")
        w = np.asarray(weights, dtype=np.float64)
        if len(w) != n:
            raise ValueError("len(weights) != len(samples)")
    else:
        w = np.ones(n)
    w_mean = w.mean()

    cfg = spec.train
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed,
                                                       spawn_key=(0x9E57,)))
    if spec.family == "cvae":
        model = CvaeModel.create(spec, rng)
    else:
        model = DiffusionModel.create(spec, rng)
    params = model.params
    state = AdamState.for_params(params, lr=cfg.lr)
    S = model.schedule.S if spec.family == "diffusion" else None

    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        epoch_loss = 0.0
        for batch_no, idx in enumerate(minibatches(n, cfg.batch_size, rng)):
            yb, cb, wb = y[idx], cond[idx], w[idx]
            if spec.family == "cvae":
                eps = rng.standard_normal((len(idx), spec.r))

                def loss_fn(pv):
                    elbo = _elbo_graph(model, pv, yb, cb, eps)
                    return ad.vmean(Var(wb) * (-elbo)) / w_mean
            else:
                s_idx = rng.integers(1, S + 1, size=len(idx))
                eps = rng.standard_normal((len(idx), spec.m))
                uncond = rng.uniform(size=len(idx)) < spec.p_uncond

                def loss_fn(pv):
                    per = _diffusion_loss_graph(model, pv, yb, cb, s_idx, eps, uncond)
                    return ad.vmean(Var(wb) * per) / w_mean

            try:
                val, grads = ad.value_and_grad(loss_fn, params)
            except TrainingError as err:
                raise TrainingError(
                    f"{spec.kind} diverged at epoch {epoch} batch {batch_no}: {err}"
                ) from err
            params, state = adam_step(state, params, grads, lr=lr)
            epoch_loss += val * len(idx)
        model.loss_trace.append(epoch_loss / n)
    model.set_params(params)
    return model


# ---------------------------------------------------------------------------
# Checkpoints


def save_generator(path, model, kind: str) -> None:
    if isinstance(model, CvaeModel):
        doc = {
            "kind": kind,
            "r": model.r,
            "m": model.m,
            "d": model.d,
            "decoder_variance": model.decoder_variance,
            "with_v": model.with_v,
            "generation_noise": model.generation_noise,
            "encoder": model.encoder.to_dict(),
            "prior": model.prior.to_dict(),
            "decoder": model.decoder.to_dict(),
        }
    else:
        doc = {
            "kind": kind,
            "m": model.m,
            "d": model.d,
            "S": model.schedule.S,
            "guidance_w": model.guidance_w,
            "p_uncond": model.p_uncond,
            "with_v": model.with_v,
            "schedule": model.schedule.gammas.tolist(),
            "null_cond": model.null_cond.tolist(),
            "net": model.net.to_dict(),
        }
    Path(path).write_text(json.dumps(doc))


def load_generator(path):
    doc = json.loads(Path(path).read_text())
    if "cvae" in doc["kind"]:
        model = CvaeModel(
            encoder=Mlp.from_dict(doc["encoder"]),
            prior=Mlp.from_dict(doc["prior"]),
            decoder=Mlp.from_dict(doc["decoder"]),
            r=doc["r"], m=doc["m"], d=doc["d"],
            decoder_variance=doc["decoder_variance"],
            with_v=doc["with_v"], generation_noise=doc["generation_noise"],
        )
    else:
        model = DiffusionModel(
            net=Mlp.from_dict(doc["net"]),
            null_cond=np.asarray(doc["null_cond"], dtype=np.float64),
            schedule=NoiseSchedule(np.asarray(doc["schedule"])),
            m=doc["m"], d=doc["d"], guidance_w=doc["guidance_w"],
            p_uncond=doc["p_uncond"], with_v=doc["with_v"],
        )
    return model, doc["kind"]

"""Conditional DDPM over VAE latents with epsilon-prediction.

Latents are standardised per dimension with statistics stored alongside the
denoiser, so the forward process always starts from roughly unit-scale data.
Trace arrays are ordered from z^K down to z^0: position i holds step k = K - i.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import Context, ContextBatch
from .diffcompute import (
    ParameterStore,
    Tensor,
    adam_update,
    apply_dense,
    concat,
    gaussian_log_prob,
    getitem,
    init_dense,
    load_checkpoint,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    save_checkpoint,
    sinusoidal_timestep_embedding,
    square,
    sub,
    tanh,
    tsum,
)
from .errors import InvalidInputError
from .nets import ContextNetConfig, context_features, init_context_net

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-8


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    K: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray

    def step_var(self, k: int) -> float:
        """Reverse-step variance with the positivity floor."""
        return max(float(self.posterior_var[k - 1]), VAR_FLOOR)


def make_schedule(K: int = 50, beta_min: float = 1e-4, beta_max: float = 0.2) -> DiffusionSchedule:
    """Linear beta schedule. Arrays are indexed 0..K-1 for steps k = 1..K."""
    if K < 1 or not (0.0 < beta_min <= beta_max < 1.0):
        raise InvalidInputError(f"schedule needs K >= 1 and 0 < beta_min <= beta_max < 1, got "
                                f"K={K}, beta_min={beta_min}, beta_max={beta_max}")
    beta = np.linspace(beta_min, beta_max, K) if K > 1 else np.array([beta_min])
    alpha = 1.0 - beta
    alpha_bar = np.empty(K)
    acc = 1.0
    for i in range(K):
        acc = acc * alpha[i]
        alpha_bar[i] = acc
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    posterior_var = beta * (1.0 - prev) / (1.0 - alpha_bar)
    return DiffusionSchedule(K, beta, alpha, alpha_bar, posterior_var)


def _check_k(k, K):
    k = np.asarray(k)
    if np.any(k < 1) or np.any(k > K):
        raise InvalidInputError(f"diffusion step k must lie in [1, {K}]")


def q_sample(z0, k, eps, sched: DiffusionSchedule):
    """Closed-form forward marginal; k may be a scalar or a per-row vector."""
    _check_k(k, sched.K)
    ab = sched.alpha_bar[np.asarray(k) - 1]
    z0 = np.asarray(z0, dtype=np.float64)
    if np.ndim(ab):
        ab = ab[:, None]
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * np.asarray(eps, dtype=np.float64)


def forward_step(z_prev, k, eps, sched: DiffusionSchedule):
    """One transition of the forward Markov chain, z^{k-1} -> z^k."""
    _check_k(k, sched.K)
    b = sched.beta[k - 1]
    return math.sqrt(1.0 - b) * np.asarray(z_prev) + math.sqrt(b) * np.asarray(eps)


@dataclass(frozen=True)
class DiffusionConfig:
    latent_dim: int = 16
    K: int = 50
    beta_min: float = 1e-4
    beta_max: float = 0.2
    hidden: int = 128
    time_embed: int = 32
    batch_size: int = 64
    max_grad_norm: float = 10.0
    context: ContextNetConfig = field(default_factory=ContextNetConfig)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["context"] = ContextNetConfig(**d.get("context", {}))
        return cls(**d)

    def schedule(self) -> DiffusionSchedule:
        return make_schedule(self.K, self.beta_min, self.beta_max)


class DenoiserModel:
    """eps_theta(z^k, k, c): context net + timestep embedding + residual MLP trunk."""

    def __init__(self, config: DiffusionConfig = DiffusionConfig(), seed: int = 0,
                 params: ParameterStore | None = None, latent_mean=None, latent_std=None):
        self.config = config
        D, Hd = config.latent_dim, config.hidden
        if params is None:
            params = ParameterStore()
            rng = np.random.default_rng(seed)
            init_context_net(params, "ctx", config.context, rng)
            init_dense(params, "temb", config.time_embed, 64, rng)
            init_dense(params, "in", D + 64 + config.context.out_dim, Hd, rng)
            init_dense(params, "h1", Hd, Hd, rng)
            init_dense(params, "h2", Hd, Hd, rng)
            init_dense(params, "out", Hd, D, rng)
        self.params = params
        self.latent_mean = np.zeros(D) if latent_mean is None else np.asarray(latent_mean, dtype=np.float64)
        self.latent_std = np.ones(D) if latent_std is None else np.asarray(latent_std, dtype=np.float64)

    def normalize(self, z):
        return (np.asarray(z) - self.latent_mean) / self.latent_std

    def denormalize(self, zn):
        return np.asarray(zn) * self.latent_std + self.latent_mean

    def context_features(self, ctx: ContextBatch) -> Tensor:
        return context_features(self.params, "ctx", ctx)

    def eps(self, zk, k, cfeat) -> Tensor:
        """zk (B, D) normalised latents, k (B,) ints, cfeat (B, C) -> predicted noise (B, D)."""
        p = self.params
        temb = tanh(apply_dense(p, "temb", Tensor(sinusoidal_timestep_embedding(k, self.config.time_embed))))
        h = relu(apply_dense(p, "in", concat([zk, temb, cfeat], axis=1)))
        h = relu(apply_dense(p, "h1", h)) + h
        h = relu(apply_dense(p, "h2", h)) + h
        return apply_dense(p, "out", h)

    def copy(self) -> "DenoiserModel":
        return DenoiserModel(self.config, params=self.params.copy(), latent_mean=self.latent_mean.copy(),
                             latent_std=self.latent_std.copy())

    def save(self, path, extra: dict | None = None):
        meta = {"kind": "denoiser", "config": self.config.to_dict(),
                "latent_mean": self.latent_mean.tolist(), "latent_std": self.latent_std.tolist()}
        meta.update(extra or {})
        save_checkpoint(path, self.params, meta)

    @classmethod
    def load(cls, path) -> "DenoiserModel":
        params, meta = load_checkpoint(path)
        if meta.get("kind") != "denoiser":
            raise InvalidInputError(f"{path}: field 'meta.kind' is {meta.get('kind')!r}, expected 'denoiser'")
        return cls(DiffusionConfig.from_dict(meta["config"]), params=params,
                   latent_mean=meta["latent_mean"], latent_std=meta["latent_std"])


def dm_loss_batch(z0n, ctx: ContextBatch, k, eps, model: DenoiserModel, sched: DiffusionSchedule) -> Tensor:
    """Batch mean of the per-sample squared noise-prediction error (normalised latents)."""
    zk = q_sample(z0n, k, eps, sched)
    pred = model.eps(Tensor(zk), k, model.context_features(ctx))
    return mean(tsum(square(sub(pred, np.asarray(eps, dtype=np.float64))), axis=1))


def dm_loss(z0, c: Context, k: int, eps, model: DenoiserModel, sched: DiffusionSchedule) -> Tensor:
    """||eps - eps_theta(q_sample(z0, k, eps), k, c)||^2 for one latent in model (normalised) units."""
    return dm_loss_batch(np.asarray(z0, dtype=np.float64)[None], ContextBatch.stack([c]),
                         np.array([k]), np.asarray(eps, dtype=np.float64)[None], model, sched)


def _mean_from_eps(zk, k, eps_pred, sched):
    """DDPM posterior mean; works on arrays or Tensors with k a per-row vector."""
    k = np.asarray(k)
    a = sched.alpha[k - 1][:, None]
    coef = (sched.beta[k - 1] / np.sqrt(1.0 - sched.alpha_bar[k - 1]))[:, None]
    if isinstance(eps_pred, Tensor):
        return mul(sub(zk, mul(eps_pred, coef)), 1.0 / np.sqrt(a))
    return (zk - coef * eps_pred) / np.sqrt(a)


def step_variances(k, sched: DiffusionSchedule) -> np.ndarray:
    return np.maximum(sched.posterior_var[np.asarray(k) - 1], VAR_FLOOR)


def reverse_step_params(z_k, k: int, c: Context, model: DenoiserModel, sched: DiffusionSchedule):
    """(mu, var) of p_theta(z^{k-1} | z^k, c) for one normalised latent."""
    _check_k(k, sched.K)
    with no_grad():
        cfeat = model.context_features(ContextBatch.stack([c]))
        e = model.eps(Tensor(np.asarray(z_k, dtype=np.float64)[None]), np.array([k]), cfeat).data
    mu = _mean_from_eps(np.asarray(z_k, dtype=np.float64)[None], np.array([k]), e, sched)[0]
    return mu, np.full(mu.shape, step_variances(k, sched))


@dataclass(frozen=True, eq=False)
class DenoisingTrace:
    latents: np.ndarray  # (K+1, D) z^K ... z^0, normalised units
    means: np.ndarray  # (K, D)
    variances: np.ndarray  # (K, D)
    log_prob_old: np.ndarray  # (K,)
    context: Context | None = None


@dataclass(frozen=True, eq=False)
class TraceBatch:
    """Batched traces; same layout as DenoisingTrace with a leading batch axis."""

    latents: np.ndarray  # (B, K+1, D)
    means: np.ndarray  # (B, K, D)
    variances: np.ndarray  # (K, D)
    log_prob_old: np.ndarray  # (B, K)

    def __len__(self):
        return self.latents.shape[0]

    def trace(self, i: int, context: Context | None = None) -> DenoisingTrace:
        return DenoisingTrace(self.latents[i], self.means[i], self.variances, self.log_prob_old[i], context)

    def take(self, idx) -> "TraceBatch":
        return TraceBatch(self.latents[idx], self.means[idx], self.variances, self.log_prob_old[idx])


def _log_prob_np(x, mu, var):
    return -0.5 * np.sum(np.log(2.0 * math.pi * var) + (x - mu) ** 2 / var, axis=-1)


def sample_batch(ctx: ContextBatch, model: DenoiserModel, sched: DiffusionSchedule, noise: np.ndarray):
    """Ancestral sampling for B contexts.

    noise (B, K+1, D): row 0 seeds z^K, row i drives the transition out of k = K - i + 1.
    Returns (z0 in raw latent units (B, D), TraceBatch).
    """
    K, D = sched.K, model.config.latent_dim
    B = len(ctx)
    if noise.shape != (B, K + 1, D):
        raise InvalidInputError(f"noise must have shape {(B, K + 1, D)}, got {noise.shape}")
    lat = np.empty((B, K + 1, D))
    means = np.empty((B, K, D))
    lp = np.empty((B, K))
    var = np.empty((K, D))
    lat[:, 0] = noise[:, 0]
    with no_grad():
        cfeat = model.context_features(ctx)
        for i in range(K):
            k = K - i
            kk = np.full(B, k)
            e = model.eps(Tensor(lat[:, i]), kk, cfeat).data
            mu = _mean_from_eps(lat[:, i], kk, e, sched)
            v = step_variances(k, sched)
            lat[:, i + 1] = mu + math.sqrt(v) * noise[:, i + 1]
            means[:, i] = mu
            var[i] = v
            lp[:, i] = _log_prob_np(lat[:, i + 1], mu, v)
    return model.denormalize(lat[:, K]), TraceBatch(lat, means, var, lp)


def sample(c: Context, model: DenoiserModel, sched: DiffusionSchedule, rng: np.random.Generator):
    """One conditional sample; returns (z0 raw units, DenoisingTrace)."""
    noise = rng.standard_normal((1, sched.K + 1, model.config.latent_dim))
    z0, tb = sample_batch(ContextBatch.stack([c]), model, sched, noise)
    return z0[0], tb.trace(0, c)


def trace_log_probs(traces: TraceBatch, ctx: ContextBatch, model: DenoiserModel, sched: DiffusionSchedule,
                    steps: np.ndarray | None = None) -> Tensor:
    """Differentiable log p_theta(z^{k-1} | z^k, c) for every trace and selected step.

    ``steps`` indexes trace positions (0..K-1); all K by default. Returns (B, S).
    """
    K = sched.K
    B = len(traces)
    steps = np.arange(K) if steps is None else np.asarray(steps)
    S = len(steps)
    ks = np.tile(K - steps, B)
    zk = traces.latents[:, steps].reshape(B * S, -1)
    znext = traces.latents[:, steps + 1].reshape(B * S, -1)
    cfeat = model.context_features(ctx)
    cfeat_rep = getitem(cfeat, np.repeat(np.arange(B), S))
    e = model.eps(Tensor(zk), ks, cfeat_rep)
    mu = _mean_from_eps(zk, ks, e, sched)
    var = np.repeat(traces.variances[steps][None], B, axis=0).reshape(B * S, -1)
    lp = gaussian_log_prob(znext, mu, var, axis=1)
    return reshape(lp, (B, S))


# ---- training ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LatentDataset:
    """Encoder posterior means (raw units) paired with their contexts."""

    latents: np.ndarray
    contexts: ContextBatch
    scenario_ids: np.ndarray

    def __len__(self):
        return self.latents.shape[0]

    def take(self, idx) -> "LatentDataset":
        return LatentDataset(self.latents[idx], self.contexts.take(idx), self.scenario_ids[idx])


def fit_normalization(model: DenoiserModel, latents: np.ndarray):
    model.latent_mean = latents.mean(axis=0)
    model.latent_std = np.maximum(latents.std(axis=0), 1e-3)


def cosine_lr(lr: float, lr_final: float, epoch: int, epochs: int) -> float:
    if epochs <= 1:
        return lr
    return lr_final + 0.5 * (lr - lr_final) * (1.0 + math.cos(math.pi * epoch / (epochs - 1)))


def train_dm(data: LatentDataset, model: DenoiserModel, sched: DiffusionSchedule, epochs: int, lr: float,
             seed: int, on_epoch=None, lr_final: float | None = None, ema_decay: float | None = None) -> list[dict]:
    """Minibatch Adam on the noise-prediction loss with optional cosine decay. One record per epoch.

    With ``ema_decay`` an exponential moving average of the weights is tracked
    and copied into the model at the end.
    """
    if len(data) == 0:
        raise InvalidInputError("train_dm needs a non-empty latent dataset")
    cfg = model.config
    rng = np.random.default_rng(seed)
    z0n = model.normalize(data.latents)
    ema = {k: model.params[k].data.copy() for k in model.params} if ema_decay else None
    report = []
    for epoch in range(epochs):
        lr_e = lr if lr_final is None else cosine_lr(lr, lr_final, epoch, epochs)
        order = rng.permutation(len(data))
        tot = 0.0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            k = rng.integers(1, sched.K + 1, size=len(idx))
            eps = rng.standard_normal((len(idx), cfg.latent_dim))
            loss = dm_loss_batch(z0n[idx], data.contexts.take(idx), k, eps, model, sched)
            loss.backward()
            adam_update(model.params, lr_e, max_grad_norm=cfg.max_grad_norm)
            if ema is not None:
                for k, v in ema.items():
                    v *= ema_decay
                    v += (1.0 - ema_decay) * model.params[k].data
            tot += len(idx) * loss.item()
        rec = {"epoch": epoch, "loss": tot / len(data), "lr": lr_e}
        report.append(rec)
        log.info("dm epoch %d loss %.4f", epoch, rec["loss"])
        if on_epoch:
            on_epoch(rec)
    if ema is not None:
        for k, v in ema.items():
            model.params[k].data = v
    return report

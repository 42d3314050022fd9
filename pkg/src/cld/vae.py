"""Trajectory VAE: LSTM+CNN encoder to a Gaussian latent, LSTM decoder to actions.

Decoded actions are squashed into the action bounds and rolled out through
the unicycle model, so the reconstruction loss lives in state space.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import kernels
from .core import A_MAX, DT, W_MAX, Context, ContextBatch, Trajectory, TrajectoryDataset, to_ego_frame
from .diffcompute import (
    ParameterStore,
    Tensor,
    adam_update,
    apply_dense,
    clip,
    concat,
    exp,
    init_dense,
    init_lstm,
    kl_standard_normal_logvar,
    load_checkpoint,
    mean,
    mul,
    no_grad,
    reshape,
    run_lstm,
    run_lstm_const_input,
    save_checkpoint,
    square,
    stack,
    sub,
    tanh,
    tsum,
    unicycle_rollout,
)
from .diffcompute.tensor import add, getitem
from .dynamics import rollout_arrays
from .errors import InvalidInputError
from .nets import POS_SCALE, SPEED_SCALE, ContextNetConfig, context_features, init_context_net

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class VaeConfig:
    latent_dim: int = 16
    horizon: int = 20
    hidden: int = 64
    kl_weight: float = 0.01
    kl_warmup_frac: float = 0.1
    sigma_floor: float = 1e-6
    dt: float = DT
    accel_max: float = A_MAX
    yaw_rate_max: float = W_MAX
    batch_size: int = 128
    max_grad_norm: float = 10.0
    context: ContextNetConfig = field(default_factory=ContextNetConfig)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["context"] = ContextNetConfig(**d.get("context", {}))
        return cls(**d)


class VaeModel:
    def __init__(self, config: VaeConfig = VaeConfig(), seed: int = 0, params: ParameterStore | None = None):
        self.config = config
        if params is None:
            params = ParameterStore()
            rng = np.random.default_rng(seed)
            c, H, D = config.context, config.hidden, config.latent_dim
            init_context_net(params, "ctx", c, rng)
            init_lstm(params, "enc.traj", 5, H, rng)
            init_dense(params, "enc.head", H + c.out_dim, H, rng)
            init_dense(params, "enc.mu", H, D, rng)
            init_dense(params, "enc.logvar", H, D, rng)
            init_dense(params, "dec.init", D + c.out_dim, 2 * H, rng)
            init_lstm(params, "dec.lstm", D + c.out_dim, H, rng)
            init_dense(params, "dec.out", H, 2, rng)
        self.params = params

    def save(self, path):
        save_checkpoint(path, self.params, {"kind": "vae", "config": self.config.to_dict()})

    @classmethod
    def load(cls, path) -> "VaeModel":
        params, meta = load_checkpoint(path)
        if meta.get("kind") != "vae":
            raise InvalidInputError(f"{path}: field 'meta.kind' is {meta.get('kind')!r}, expected 'vae'")
        return cls(VaeConfig.from_dict(meta["config"]), params=params)

    # ---- graph pieces ---------------------------------------------------
    def context_features(self, ctx: ContextBatch) -> Tensor:
        return context_features(self.params, "ctx", ctx)

    def encode_tensors(self, states_ego: np.ndarray, cfeat: Tensor):
        """states_ego (B, T+1, 4) -> (mu, logvar) tensors."""
        cfg = self.config
        if states_ego.shape[1] != cfg.horizon + 1:
            raise InvalidInputError(f"trajectory horizon {states_ego.shape[1] - 1} != configured {cfg.horizon}")
        seq = np.empty(states_ego.shape[:2] + (5,))
        seq[..., 0] = states_ego[..., 0] / POS_SCALE
        seq[..., 1] = states_ego[..., 1] / POS_SCALE
        seq[..., 2] = states_ego[..., 2] / SPEED_SCALE
        seq[..., 3] = np.cos(states_ego[..., 3])
        seq[..., 4] = np.sin(states_ego[..., 3])
        hs, _ = run_lstm(self.params, "enc.traj", Tensor(seq))
        h = tanh(apply_dense(self.params, "enc.head", concat([hs[-1], cfeat], axis=1)))
        mu = apply_dense(self.params, "enc.mu", h)
        lo = 2.0 * math.log(cfg.sigma_floor)
        logvar = clip(apply_dense(self.params, "enc.logvar", h), lo, 10.0)
        return mu, logvar

    def decode_actions(self, z, cfeat: Tensor) -> Tensor:
        """Latent (B, D) -> bounded actions (B, T, 2)."""
        cfg = self.config
        inp = concat([z, cfeat], axis=1)
        state0 = tanh(apply_dense(self.params, "dec.init", inp))
        hs, _ = run_lstm_const_input(self.params, "dec.lstm", inp, cfg.horizon, state0)
        B, H = z.shape[0], cfg.hidden
        flat = reshape(stack(hs, axis=1), (B * cfg.horizon, H))
        raw = tanh(apply_dense(self.params, "dec.out", flat))
        return mul(reshape(raw, (B, cfg.horizon, 2)), np.array([cfg.accel_max, cfg.yaw_rate_max]))


def _ego_states(traj: Trajectory, c: Context) -> np.ndarray:
    e = c.ego_now
    return to_ego_frame(traj.states, np.array([e.x, e.y, e.theta]))


def encode(traj: Trajectory, c: Context, model: VaeModel):
    """Posterior (mu, sigma) for one trajectory/context pair."""
    with no_grad():
        ctx = ContextBatch.stack([c])
        mu, logvar = model.encode_tensors(_ego_states(traj, c)[None], model.context_features(ctx))
    return mu.data[0].copy(), np.exp(0.5 * logvar.data[0])


def encode_batch(states_ego: np.ndarray, ctx: ContextBatch, model: VaeModel):
    with no_grad():
        mu, logvar = model.encode_tensors(states_ego, model.context_features(ctx))
    return mu.data.copy(), np.exp(0.5 * logvar.data)


def reparameterize(mu, sigma, noise) -> Tensor:
    """z = mu + sigma * noise; the noise is a constant in the graph."""
    if isinstance(sigma, Tensor):
        return add(mu, mul(sigma, np.asarray(noise, dtype=np.float64)))
    sigma = np.maximum(np.asarray(sigma, dtype=np.float64), 1e-6)
    return add(mu, mul(Tensor(sigma), np.asarray(noise, dtype=np.float64)))


def decode_actions_batch(z: np.ndarray, ctx: ContextBatch, model: VaeModel) -> np.ndarray:
    with no_grad():
        return model.decode_actions(Tensor(np.atleast_2d(z)), model.context_features(ctx)).data.copy()


def decode(z, c: Context, model: VaeModel) -> Trajectory:
    """Decode a latent into actions and roll them out from the context's current state."""
    z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
    acts = decode_actions_batch(z[None], ContextBatch.stack([c]), model)[0]
    states = rollout_arrays(c.ego_now.as_array()[None], acts[None], model.config.dt)[0]
    return Trajectory(states, acts, model.config.dt)


def reconstruction_error(pred, target: np.ndarray) -> Tensor:
    """Per-sample squared state error summed over time and (x, y, v, heading).

    The heading difference is wrapped onto (-pi, pi] before squaring.
    """
    diff = sub(pred, target)
    shift = np.zeros(diff.shape)
    shift[..., 3] = kernels.numpy_backend.wrap_angles(diff.data[..., 3]) - diff.data[..., 3]
    return tsum(tsum(square(add(diff, shift)), axis=-1), axis=-1)


def vae_loss_batch(states_ego: np.ndarray, ctx: ContextBatch, model: VaeModel, noise: np.ndarray,
                   kl_weight: float | None = None):
    """Mean over the batch of ||tau - tau_hat||^2 + kl_weight * KL. Returns (loss, recon, kl)."""
    cfg = model.config
    kl_weight = cfg.kl_weight if kl_weight is None else kl_weight
    cfeat = model.context_features(ctx)
    mu, logvar = model.encode_tensors(states_ego, cfeat)
    z = reparameterize(mu, exp(mul(logvar, 0.5)), noise)
    actions = model.decode_actions(z, cfeat)
    init = np.zeros((len(ctx), 4))
    init[:, 2] = states_ego[:, 0, 2]
    pred = unicycle_rollout(init, actions, cfg.dt)
    recon = mean(reconstruction_error(pred, states_ego))
    kl = mean(kl_standard_normal_logvar(mu, logvar))
    return add(recon, mul(kl, kl_weight)), recon.item(), kl.item()


def vae_loss(traj: Trajectory, c: Context, model: VaeModel, noise) -> Tensor:
    loss, _, _ = vae_loss_batch(_ego_states(traj, c)[None], ContextBatch.stack([c]), model,
                                np.asarray(noise, dtype=np.float64)[None])
    return loss


def reconstruct_positions(dataset: TrajectoryDataset, model: VaeModel, batch_size: int = 512) -> np.ndarray:
    """Decoded ego-frame states using the posterior mean, (N, T+1, 4)."""
    out = []
    for i in range(0, len(dataset), batch_size):
        part = dataset.take(slice(i, i + batch_size))
        mu, _ = encode_batch(part.states, part.contexts, model)
        acts = decode_actions_batch(mu, part.contexts, model)
        init = np.zeros((len(part), 4))
        init[:, 2] = part.states[:, 0, 2]
        out.append(rollout_arrays(init, acts, model.config.dt))
    return np.concatenate(out)


def reconstruction_rmse(dataset: TrajectoryDataset, model: VaeModel) -> float:
    pred = reconstruct_positions(dataset, model)
    err = pred[..., :2] - dataset.states[..., :2]
    return float(np.sqrt(np.mean(np.sum(err ** 2, axis=-1))))


def train_vae(dataset: TrajectoryDataset, model: VaeModel, epochs: int, lr: float, seed: int,
              on_epoch=None) -> list[dict]:
    """Minibatch Adam on the VAE loss with a linear KL warm-up.

    Returns one record per epoch: epoch, loss, kl, recon (batch-size weighted means).
    """
    if len(dataset) == 0:
        raise InvalidInputError("train_vae needs a non-empty dataset")
    cfg = model.config
    rng = np.random.default_rng(seed)
    warm = max(1.0, cfg.kl_warmup_frac * epochs)
    report = []
    for epoch in range(epochs):
        w = cfg.kl_weight * min(1.0, epoch / warm)
        order = rng.permutation(len(dataset))
        tot = np.zeros(3)
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            part = dataset.take(idx)
            noise = rng.standard_normal((len(idx), cfg.latent_dim))
            loss, recon, kl = vae_loss_batch(part.states, part.contexts, model, noise, w)
            loss.backward()
            adam_update(model.params, lr, max_grad_norm=cfg.max_grad_norm)
            tot += len(idx) * np.array([loss.item(), kl, recon])
        tot /= len(dataset)
        rec = {"epoch": epoch, "loss": float(tot[0]), "kl": float(tot[1]), "recon": float(tot[2]),
               "kl_weight": w}
        report.append(rec)
        log.info("vae epoch %d loss %.4f recon %.4f kl %.3f", epoch, rec["loss"], rec["recon"], rec["kl"])
        if on_epoch:
            on_epoch(rec)
    return report

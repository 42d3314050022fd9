"""Context encoder shared (architecturally) by the VAE and the denoiser.

Map crops go through two strided convolutions; the masked neighbour
history goes through an LSTM over the H past steps. Both features are
fused by a dense layer into a fixed-width context embedding.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .core import ContextBatch
from .diffcompute import (
    Tensor,
    apply_conv,
    apply_dense,
    concat,
    init_conv,
    init_dense,
    init_lstm,
    relu,
    reshape,
    run_lstm,
    tanh,
)

POS_SCALE = 10.0
SPEED_SCALE = 10.0


@dataclass(frozen=True)
class ContextNetConfig:
    history_steps: int = 10
    neighbors: int = 4
    crop_size: int = 32
    lstm_hidden: int = 32
    map_feat: int = 32
    out_dim: int = 64

    def to_dict(self):
        return asdict(self)


def history_sequence(ctx: ContextBatch) -> np.ndarray:
    """(B, H, (M+1)*5) network input; padded neighbour rows are zeroed by the mask."""
    hist = ctx.history
    B, R, H, _ = hist.shape
    mask = ctx.mask.astype(np.float64)[:, :, None]
    feats = np.empty((B, R, H, 5))
    feats[..., 0] = hist[..., 0] / POS_SCALE
    feats[..., 1] = hist[..., 1] / POS_SCALE
    feats[..., 2] = hist[..., 2] / SPEED_SCALE
    feats[..., 3] = hist[..., 3] / math.pi
    feats[..., 4] = 1.0
    feats *= mask[..., None]
    return feats.transpose(0, 2, 1, 3).reshape(B, H, R * 5)


def init_context_net(store, prefix: str, cfg: ContextNetConfig, rng):
    init_conv(store, f"{prefix}.conv1", 1, 4, 4, rng)
    init_conv(store, f"{prefix}.conv2", 4, 8, 2, rng)
    side = cfg.crop_size // 4 // 2
    init_dense(store, f"{prefix}.map", 8 * side * side, cfg.map_feat, rng)
    init_lstm(store, f"{prefix}.hist", (cfg.neighbors + 1) * 5, cfg.lstm_hidden, rng)
    init_dense(store, f"{prefix}.fuse", cfg.map_feat + cfg.lstm_hidden, cfg.out_dim, rng)


def context_features(store, prefix: str, ctx: ContextBatch) -> Tensor:
    B = len(ctx)
    m = relu(apply_conv(store, f"{prefix}.conv1", Tensor(ctx.map_crop), 4))
    m = relu(apply_conv(store, f"{prefix}.conv2", m, 2))
    m = tanh(apply_dense(store, f"{prefix}.map", reshape(m, (B, -1))))
    hs, _ = run_lstm(store, f"{prefix}.hist", Tensor(history_sequence(ctx)))
    return tanh(apply_dense(store, f"{prefix}.fuse", concat([m, hs[-1]], axis=1)))

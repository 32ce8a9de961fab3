"""Attention autoencoder compressing 2D vessel images to a 1-channel latent."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import numcore as nc

log = logging.getLogger(__name__)

DICE_EPS = 1e-6


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class AeConfig:
    image_size: int = 64
    channels: tuple[int, int, int] = (8, 16, 32)
    heads: int = 4
    steps: int = 1000
    batch_size: int = 8
    lr: float = 5e-4
    seed: int = 0
    log_every: int = 100

    @property
    def latent_hw(self) -> int:
        return self.image_size // 4


@dataclass
class LatentStats:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError(f"latent std must be > 0, got {self.std}")

    def normalize(self, z):
        return (z - self.mean) / self.std

    def denormalize(self, z):
        return z * self.std + self.mean


class AeNetwork:
    def __init__(self, config: AeConfig = AeConfig(), dtype: torch.dtype = torch.float32):
        if config.image_size % 4:
            raise ValueError(f"image_size must be divisible by 4, got {config.image_size}")
        self.config = config
        c0, c1, c2 = config.channels
        ps = nc.ParamSet(config.seed, dtype)
        nc.init_conv(ps, "enc.conv_in", 1, c0)
        nc.init_resblock(ps, "enc.rb1", c0, c0)
        nc.init_conv(ps, "enc.down1", c0, c1)
        nc.init_resblock(ps, "enc.rb2", c1, c1)
        nc.init_conv(ps, "enc.down2", c1, c2)
        nc.init_resblock(ps, "enc.rb3", c2, c2)
        nc.init_groupnorm(ps, "enc.attn_norm", c2)
        nc.init_mha(ps, "enc.attn", c2)
        nc.init_groupnorm(ps, "enc.out_norm", c2)
        nc.init_conv(ps, "enc.conv_out", c2, 1)

        nc.init_conv(ps, "dec.conv_in", 1, c2)
        nc.init_resblock(ps, "dec.rb1", c2, c2)
        nc.init_groupnorm(ps, "dec.attn_norm", c2)
        nc.init_mha(ps, "dec.attn", c2)
        nc.init_conv(ps, "dec.up1", c2, c1)
        nc.init_resblock(ps, "dec.rb2", c1, c1)
        nc.init_conv(ps, "dec.up2", c1, c0)
        nc.init_resblock(ps, "dec.rb3", c0, c0)
        nc.init_groupnorm(ps, "dec.out_norm", c0)
        nc.init_conv(ps, "dec.conv_out", c0, 1)
        self.params = ps

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        h = self.config.latent_hw
        return (h, h, 1)

    def _attn(self, p: nc.Scope, name: str, h: torch.Tensor) -> torch.Tensor:
        return h + nc.mha2d(p.scope(name), nc.groupnorm(p.scope(f"{name}_norm"), h), self.config.heads)

    def encode_tensor(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 1, H, W) -> (B, 1, H/4, W/4)."""
        s = self.config.image_size
        if x.dim() != 4 or tuple(x.shape[1:]) != (1, s, s):
            raise nc.ShapeError(f"encode: expected (B, 1, {s}, {s}), got {tuple(x.shape)}")
        p = self.params.scope("enc")
        h = nc.conv2d(p.scope("conv_in"), x)
        h = nc.resblock(p.scope("rb1"), h)
        h = nc.down2(p.scope("down1"), h)
        h = nc.resblock(p.scope("rb2"), h)
        h = nc.down2(p.scope("down2"), h)
        h = nc.resblock(p.scope("rb3"), h)
        h = self._attn(p, "attn", h)
        return nc.conv2d(p.scope("conv_out"), nc.silu(nc.groupnorm(p.scope("out_norm"), h)))

    def decode_tensor(self, z: torch.Tensor) -> torch.Tensor:
        """(B, 1, H/4, W/4) -> (B, 1, H, W) in [0, 1]."""
        hw = self.config.latent_hw
        if z.dim() != 4 or tuple(z.shape[1:]) != (1, hw, hw):
            raise nc.ShapeError(f"decode: expected (B, 1, {hw}, {hw}), got {tuple(z.shape)}")
        p = self.params.scope("dec")
        h = nc.conv2d(p.scope("conv_in"), z)
        h = nc.resblock(p.scope("rb1"), h)
        h = self._attn(p, "attn", h)
        h = nc.up2(p.scope("up1"), h)
        h = nc.resblock(p.scope("rb2"), h)
        h = nc.up2(p.scope("up2"), h)
        h = nc.resblock(p.scope("rb3"), h)
        h = nc.conv2d(p.scope("conv_out"), nc.silu(nc.groupnorm(p.scope("out_norm"), h)))
        return torch.sigmoid(h)


def _batched(fn, x: np.ndarray, dtype, batch: int = 64) -> np.ndarray:
    outs = []
    with torch.no_grad():
        for i in range(0, len(x), batch):
            t = torch.as_tensor(np.ascontiguousarray(x[i : i + batch]), dtype=dtype)
            outs.append(fn(t).numpy())
    return np.concatenate(outs)


def encode(net: AeNetwork, img) -> np.ndarray:
    """Image (H, W) or stack (N, H, W) -> latent (h, w, 1) or (N, h, w, 1)."""
    img = np.asarray(img, dtype=np.float32)
    single = img.ndim == 2
    x = img[None, None] if single else img[:, None]
    z = _batched(net.encode_tensor, x, net.params.dtype)[:, 0, :, :, None]
    return z[0] if single else z


def decode(net: AeNetwork, latent) -> np.ndarray:
    """Latent (h, w, 1) or (N, h, w, 1) -> image (H, W) or (N, H, W) in [0, 1]."""
    z = np.asarray(latent, dtype=np.float32)
    single = z.ndim == 3
    z = z[None] if single else z
    if z.ndim != 4 or z.shape[-1] != 1:
        raise nc.ShapeError(f"decode: expected latent (..., h, w, 1), got {z.shape}")
    img = _batched(net.decode_tensor, z[..., 0][:, None], net.params.dtype)[:, 0]
    return img[0] if single else img


def ae_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean L1 plus soft Dice loss against the 0.5-thresholded target.

    For batched input (leading dims beyond the last two) the per-image losses
    are averaged.
    """
    if pred.shape != target.shape:
        raise nc.ShapeError(f"ae_loss: pred shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    tb = (target >= 0.5).to(pred.dtype)
    p = pred.reshape(-1, pred.shape[-2] * pred.shape[-1])
    t = target.reshape(p.shape)
    tb = tb.reshape(p.shape)
    l1 = (p - t).abs().mean(dim=1)
    dice = 1 - (2 * (p * tb).sum(dim=1) + DICE_EPS) / (p.sum(dim=1) + tb.sum(dim=1) + DICE_EPS)
    return (l1 + dice).mean()


def dice_score(pred: np.ndarray, target: np.ndarray, threshold: float = 0.5) -> float:
    """Hard Dice overlap of two images after thresholding both."""
    a = np.asarray(pred) >= threshold
    b = np.asarray(target) >= threshold
    denom = a.sum() + b.sum()
    return 1.0 if denom == 0 else float(2 * (a & b).sum() / denom)


@dataclass
class AeTrainResult:
    net: AeNetwork
    stats: LatentStats
    losses: list[float] = field(default_factory=list)

    def epoch_means(self, n_images: int) -> list[float]:
        per_epoch = max(1, math.ceil(n_images / self.net.config.batch_size))
        return [float(np.mean(self.losses[i : i + per_epoch])) for i in range(0, len(self.losses), per_epoch)]


def latent_stats(net: AeNetwork, images: np.ndarray) -> LatentStats:
    z = encode(net, images).astype(np.float64)
    return LatentStats(float(z.mean()), float(z.std()))


def train_autoencoder(images, config: AeConfig = AeConfig()) -> AeTrainResult:
    """Adam training of the autoencoder on a stack of (N, H, W) training images.

    Each step draws its batch from a generator seeded by (seed, step), so a run
    is reproducible step by step.
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 3 or len(images) == 0:
        raise ValueError("train_autoencoder needs a nonempty (N, H, W) image stack")
    net = AeNetwork(config)
    state = nc.AdamState.for_params(net.params, lr=config.lr)
    n = len(images)
    bs = min(config.batch_size, n)
    losses = []
    t0 = time.perf_counter()
    for step in range(config.steps):
        rng = np.random.default_rng([config.seed, step])
        idx = np.sort(rng.choice(n, size=bs, replace=False))
        x = torch.as_tensor(images[idx][:, None])
        loss = ae_loss(net.decode_tensor(net.encode_tensor(x)), x)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDiverged(f"autoencoder loss became {value} at step {step}")
        nc.adam_step(net.params, nc.grad(loss, net.params), state)
        losses.append(value)
        if config.log_every and (step + 1) % config.log_every == 0:
            log.info("ae step=%d loss=%.5f time=%.1fs", step + 1, value, time.perf_counter() - t0)
    return AeTrainResult(net, latent_stats(net, images), losses)

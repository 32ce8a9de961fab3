"""Conditional latent DDPM: schedule, epsilon U-Net, loss and ancestral sampling."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch

from . import numcore as nc
from .autoencoder import TrainingDiverged

log = logging.getLogger(__name__)

N_CLASSES = 3
N_LEVELS = 5


# --- noise schedule -------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays are indexed by ``t - 1`` for t = 1..T."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def check_t(self, t) -> None:
        t = np.asarray(t)
        if t.size and (t.min() < 1 or t.max() > self.T):
            raise ValueError(f"t must be in [1, {self.T}], got {t.min() if t.min() < 1 else t.max()}")


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    t = np.arange(T, dtype=np.float64)
    beta = beta_start + t * (beta_end - beta_start) / (T - 1)
    alpha = 1.0 - beta
    return NoiseSchedule(beta, alpha, np.cumprod(alpha))


def scaled_linear_schedule(
    T: int, beta_start: float = 1e-4, beta_end: float = 2e-2, reference_steps: int = 1000
) -> NoiseSchedule:
    """Linear schedule whose endpoints are rescaled by ``reference_steps / T``.

    Keeps the total corruption of a ``reference_steps`` chain when running a
    shorter one; scaled endpoints are capped at 0.999.
    """
    k = reference_steps / T
    return make_linear_schedule(T, min(beta_start * k, 0.999), min(beta_end * k, 0.999))


def _coef(values: np.ndarray, t, like):
    """Schedule values at (1-based) ``t`` shaped to broadcast against ``like``."""
    t_arr = np.asarray(t)
    v = values[t_arr - 1]
    if isinstance(like, torch.Tensor):
        v = torch.as_tensor(v, dtype=like.dtype)
        if v.dim():
            v = v.reshape(-1, *([1] * (like.dim() - 1)))
        return v
    v = np.asarray(v)
    return v.reshape(-1, *([1] * (np.ndim(like) - 1))) if v.ndim else v


def q_sample(x0, t, eps, schedule: NoiseSchedule):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; ``t`` a scalar or per-sample vector."""
    schedule.check_t(t)
    if tuple(np.shape(eps)) != tuple(np.shape(x0)):
        raise ValueError(f"eps shape {tuple(np.shape(eps))} != x0 shape {tuple(np.shape(x0))}")
    ab = schedule.alpha_bar
    return _coef(np.sqrt(ab), t, x0) * x0 + _coef(np.sqrt(1.0 - ab), t, x0) * eps


def q_step(x_prev, t: int, eps, schedule: NoiseSchedule):
    """One forward transition x_t ~ N(sqrt(1 - beta_t) x_{t-1}, beta_t I)."""
    schedule.check_t(t)
    b = schedule.beta[t - 1]
    return math.sqrt(1.0 - b) * x_prev + math.sqrt(b) * eps


# --- conditioning -----------------------------------------------------------------


@dataclass
class ConditionBundle:
    """Class label plus the class-wise shape and anatomy conditions."""

    class_label: int
    shape_vec: np.ndarray  # standardized shape condition, (L_s,)
    anatomy_tokens: np.ndarray  # (8, h*w)
    shape_on: bool = True
    anatomy_on: bool = True
    shape_class: int | None = None
    anatomy_class: int | None = None

    def __post_init__(self):
        if int(self.class_label) not in (1, 2, 3):
            raise ValueError(f"class_label must be 1, 2 or 3, got {self.class_label}")
        for name in ("shape_class", "anatomy_class"):
            src = getattr(self, name)
            if src is not None and int(src) != int(self.class_label):
                raise ValueError(f"{name}={src} does not match class_label={self.class_label}")


@dataclass
class ConditionTable:
    """Dataset-level conditioning constants for all classes."""

    shape: dict[int, np.ndarray]
    anatomy: dict[int, np.ndarray]
    shape_on: bool = True
    anatomy_on: bool = True

    def bundle(self, class_label: int) -> ConditionBundle:
        c = int(class_label)
        return ConditionBundle(c, self.shape[c], self.anatomy[c], self.shape_on, self.anatomy_on, c, c)

    def with_flags(self, shape_on: bool, anatomy_on: bool) -> "ConditionTable":
        return replace(self, shape_on=shape_on, anatomy_on=anatomy_on)


# --- epsilon network ----------------------------------------------------------------


@dataclass(frozen=True)
class UNetConfig:
    latent_hw: int = 16
    channels: tuple[int, ...] = (16, 32, 32, 64, 64)
    emb_dim: int = 64
    heads: int = 4
    shape_dim: int = 32
    anatomy_tokens: int = 8
    anatomy_heads: int = 4
    seed: int = 0
    zero_out: bool = True


class EpsNetwork:
    """U-Net with 5 encoder and 5 decoder blocks (resblock + attention each).

    Encoder block i works at resolution latent_hw / 2**i; decoder block j
    concatenates the output of encoder block 5 - j + 1 (1-based). Time and
    class embeddings bias every block; shape and anatomy embeddings bias the
    decoder blocks only.
    """

    def __init__(self, config: UNetConfig = UNetConfig(), dtype: torch.dtype = torch.float32):
        if len(config.channels) != N_LEVELS:
            raise ValueError(f"need {N_LEVELS} channel widths, got {len(config.channels)}")
        if config.latent_hw % 2 ** (N_LEVELS - 1):
            raise ValueError(f"latent_hw must be divisible by {2 ** (N_LEVELS - 1)}")
        self.config = config
        ch, d = config.channels, config.emb_dim
        tok = config.latent_hw**2
        ps = nc.ParamSet(config.seed, dtype)
        nc.init_dense(ps, "time.fc1", d, d)
        nc.init_dense(ps, "time.fc2", d, d)
        ps.glorot("class_table", (N_CLASSES, d), N_CLASSES, d)
        nc.init_dense(ps, "shape.fc", config.shape_dim, d)
        nc.init_mha(ps, "anatomy.attn", tok)
        nc.init_dense(ps, "anatomy.fc", tok, d)
        nc.init_conv(ps, "conv_in", 1, ch[0])
        for i in range(N_LEVELS):
            cin = ch[0] if i == 0 else ch[i - 1]
            self._init_block(ps, f"enc{i + 1}", cin, ch[i], decoder=False)
            if i < N_LEVELS - 1:
                nc.init_conv(ps, f"enc{i + 1}.down", ch[i], ch[i])
        h_ch = ch[-1]
        for j in range(N_LEVELS):
            level = N_LEVELS - 1 - j
            self._init_block(ps, f"dec{j + 1}", h_ch + ch[level], ch[level], decoder=True)
            if j < N_LEVELS - 1:
                nc.init_conv(ps, f"dec{j + 1}.up", ch[level], ch[level])
            h_ch = ch[level]
        nc.init_groupnorm(ps, "out_norm", ch[0])
        nc.init_conv(ps, "conv_out", ch[0], 1, zero=config.zero_out)
        self.params = ps

    def _init_block(self, ps, name, cin, cout, decoder):
        d = self.config.emb_dim
        nc.init_resblock(ps, f"{name}.rb", cin, cout)
        nc.init_dense(ps, f"{name}.emb", d, cout)
        if decoder:
            nc.init_dense(ps, f"{name}.shape", d, cout)
            nc.init_dense(ps, f"{name}.anatomy", d, cout)
        nc.init_groupnorm(ps, f"{name}.attn_norm", cout)
        nc.init_mha(ps, f"{name}.attn", cout)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.config.latent_hw, self.config.latent_hw, 1)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


def _stack_conditions(cond, batch: int, dtype):
    conds = [cond] * batch if isinstance(cond, ConditionBundle) else list(cond)
    if len(conds) != batch:
        raise ValueError(f"got {len(conds)} condition bundles for a batch of {batch}")
    labels = [int(c.class_label) for c in conds]
    if any(c not in (1, 2, 3) for c in labels):
        raise ValueError(f"class id out of range: {labels}")
    shape_on = {bool(c.shape_on) for c in conds}
    anatomy_on = {bool(c.anatomy_on) for c in conds}
    if len(shape_on) != 1 or len(anatomy_on) != 1:
        raise ValueError("guidance flags must agree across a batch")
    cls = torch.as_tensor(np.array(labels) - 1, dtype=torch.long)
    shape = torch.as_tensor(np.stack([c.shape_vec for c in conds]), dtype=dtype)
    anatomy = torch.as_tensor(np.stack([c.anatomy_tokens for c in conds]), dtype=dtype)
    return cls, shape, anatomy, shape_on.pop(), anatomy_on.pop()


def eps_forward(net: EpsNetwork, x_t: torch.Tensor, t, cond, taps: dict | None = None) -> torch.Tensor:
    """Predicted noise for latents ``x_t`` of shape (B, 1, h, w).

    ``cond`` is one :class:`ConditionBundle` for the whole batch or one per
    sample. If ``taps`` is a dict, each block's output is stored in it.
    """
    cfg = net.config
    hw = cfg.latent_hw
    if x_t.dim() != 4 or tuple(x_t.shape[1:]) != (1, hw, hw):
        raise nc.ShapeError(f"eps_forward: expected (B, 1, {hw}, {hw}), got {tuple(x_t.shape)}")
    b = x_t.shape[0]
    dtype = net.params.dtype
    t = torch.as_tensor(np.broadcast_to(np.asarray(t), (b,)).copy(), dtype=torch.long)
    if t.min() < 1:
        raise ValueError("t must be >= 1")
    cls, shape_vec, anatomy_tok, shape_on, anatomy_on = _stack_conditions(cond, b, dtype)
    P = net.params

    temb = nc.dense(P.scope("time.fc1"), timestep_embedding(t, cfg.emb_dim).to(dtype))
    emb = nc.dense(P.scope("time.fc2"), nc.silu(temb)) + P["class_table"][cls]
    emb_act = nc.silu(emb)
    shape_act = anatomy_act = None
    if shape_on:
        shape_act = nc.silu(nc.dense(P.scope("shape.fc"), shape_vec))
    if anatomy_on:
        att = nc.mha(P.scope("anatomy.attn"), anatomy_tok, cfg.anatomy_heads)
        anatomy_act = nc.silu(nc.dense(P.scope("anatomy.fc"), att.mean(dim=1)))

    def block(name, h, decoder):
        p = P.scope(name)
        bias = nc.dense(p.scope("emb"), emb_act)
        if decoder and shape_act is not None:
            bias = bias + nc.dense(p.scope("shape"), shape_act)
        if decoder and anatomy_act is not None:
            bias = bias + nc.dense(p.scope("anatomy"), anatomy_act)
        h = nc.resblock(p.scope("rb"), h, bias)
        h = h + nc.mha2d(p.scope("attn"), nc.groupnorm(p.scope("attn_norm"), h), cfg.heads)
        if taps is not None:
            taps[name] = h
        return h

    h = nc.conv2d(P.scope("conv_in"), x_t.to(dtype))
    skips = []
    for i in range(N_LEVELS):
        h = block(f"enc{i + 1}", h, decoder=False)
        skips.append(h)
        if i < N_LEVELS - 1:
            h = nc.down2(P.scope(f"enc{i + 1}.down"), h)
    for j in range(N_LEVELS):
        h = block(f"dec{j + 1}", torch.cat([h, skips[N_LEVELS - 1 - j]], dim=1), decoder=True)
        if j < N_LEVELS - 1:
            h = nc.up2(P.scope(f"dec{j + 1}.up"), h)
    h = nc.silu(nc.groupnorm(P.scope("out_norm"), h))
    return nc.conv2d(P.scope("conv_out"), h)


# --- loss and sampling ------------------------------------------------------------------


def diffusion_loss(net: EpsNetwork, x0: torch.Tensor, cond, schedule: NoiseSchedule, rng: torch.Generator):
    """Mean squared error between drawn noise and predicted noise, t ~ U{1..T}."""
    if x0.shape[0] == 0:
        raise ValueError("diffusion_loss needs a nonempty batch")
    b = x0.shape[0]
    t = torch.randint(1, schedule.T + 1, (b,), generator=rng)
    eps = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
    x_t = q_sample(x0, t.numpy(), eps, schedule)
    pred = eps_forward(net, x_t, t.numpy(), cond)
    return ((eps - pred) ** 2).mean()


def p_sample_step(net, x_t, t: int, cond, schedule: NoiseSchedule, z=None, eps_pred=None):
    """One ancestral step x_t -> x_{t-1} with fixed variance sigma_t^2 = beta_t.

    ``eps_pred`` replaces the network output when given. At t = 1 no noise is added.
    """
    schedule.check_t(t)
    if eps_pred is None:
        with torch.no_grad():
            eps_pred = eps_forward(net, x_t, t, cond)
    beta, alpha, ab = schedule.beta[t - 1], schedule.alpha[t - 1], schedule.alpha_bar[t - 1]
    mean = (x_t - (beta / math.sqrt(1.0 - ab)) * eps_pred) / math.sqrt(alpha)
    if t == 1 or z is None:
        return mean
    return mean + math.sqrt(beta) * z


def sample(net: EpsNetwork, cond, n: int, seed: int, schedule: NoiseSchedule) -> np.ndarray:
    """Draw ``n`` normalized latents, shape (n, h, w, 1); deterministic in ``seed``."""
    hw = net.config.latent_hw
    gen = torch.Generator().manual_seed(int(seed))
    dtype = net.params.dtype
    x = torch.randn((n, 1, hw, hw), generator=gen, dtype=dtype)
    with torch.no_grad():
        for t in range(schedule.T, 0, -1):
            z = torch.randn(x.shape, generator=gen, dtype=dtype) if t > 1 else None
            x = p_sample_step(net, x, t, cond, schedule, z)
    return x[:, 0, :, :, None].numpy()


# --- training -------------------------------------------------------------------------


@dataclass(frozen=True)
class LdmConfig:
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    reference_steps: int = 1000
    steps: int = 2000
    batch_size: int = 16
    lr: float = 5e-4
    seed: int = 0
    shape_on: bool = True
    anatomy_on: bool = True
    log_every: int = 100
    unet: UNetConfig = UNetConfig()

    def schedule(self) -> NoiseSchedule:
        return scaled_linear_schedule(self.T, self.beta_start, self.beta_end, self.reference_steps)


@dataclass
class LdmTrainResult:
    net: EpsNetwork
    state: nc.AdamState
    losses: list[float] = field(default_factory=list)


def step_generator(seed: int, step: int) -> torch.Generator:
    s = np.random.SeedSequence([int(seed), int(step)]).generate_state(1, dtype=np.uint64)[0]
    return torch.Generator().manual_seed(int(s) & 0x7FFF_FFFF_FFFF_FFFF)


def train_ldm(
    latents: np.ndarray,
    labels: Sequence[int],
    table: ConditionTable,
    config: LdmConfig = LdmConfig(),
    resume: LdmTrainResult | None = None,
    stop_at: int | None = None,
    on_checkpoint: Callable[[LdmTrainResult], None] | None = None,
    checkpoint_every: int = 0,
) -> LdmTrainResult:
    """Adam on the noise-prediction loss over normalized latents (N, h, w, 1).

    Step k draws its batch, timesteps and noise from a generator seeded by
    (seed, k), so resuming from a saved (params, Adam state) reproduces the
    uninterrupted run. ``stop_at`` ends the run early at that step count.
    """
    latents = np.asarray(latents, dtype=np.float32)
    labels = np.asarray(labels, dtype=int)
    if len(latents) == 0:
        raise ValueError("train_ldm needs at least one latent")
    if len(labels) != len(latents):
        raise ValueError("labels and latents differ in length")
    table = table.with_flags(config.shape_on, config.anatomy_on)
    bundles = {c: table.bundle(c) for c in (1, 2, 3) if c in table.shape}
    schedule = config.schedule()
    if resume is None:
        net = EpsNetwork(config.unet)
        state = nc.AdamState.for_params(net.params, lr=config.lr)
        result = LdmTrainResult(net, state)
    else:
        result = resume
    net, state = result.net, result.state
    x_all = torch.as_tensor(latents[..., 0][:, None])
    n = len(latents)
    bs = min(config.batch_size, n)
    end = config.steps if stop_at is None else min(stop_at, config.steps)
    t0 = time.perf_counter()
    for step in range(state.step, end):
        gen = step_generator(config.seed, step)
        idx = torch.randperm(n, generator=gen)[:bs].sort().values
        conds = [bundles[int(c)] for c in labels[idx.numpy()]]
        loss = diffusion_loss(net, x_all[idx], conds, schedule, gen)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDiverged(f"diffusion loss became {value} at step {step}")
        nc.adam_step(net.params, nc.grad(loss, net.params), state)
        result.losses.append(value)
        if config.log_every and state.step % config.log_every == 0:
            log.info("ldm step=%d loss=%.5f time=%.1fs", state.step, value, time.perf_counter() - t0)
        if on_checkpoint and checkpoint_every and state.step % checkpoint_every == 0:
            on_checkpoint(result)
    return result

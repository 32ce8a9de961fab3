"""Small differentiable layer set on top of torch tensors.

Networks in this package are plain functions over a :class:`ParamSet` of named
tensors. Layers are functional (``dense(p, x)``) where ``p`` is a
:class:`Scope` into the parameter set. Shape algebra:

* ``conv2d``: 3x3, stride 1, same padding.
* ``down2``: 3x3, stride 2, padding 1 (halves H and W).
* ``up2``: nearest 2x upsample followed by ``conv2d``.
* ``mha``: ``heads`` heads splitting the channel dim evenly; for feature maps
  the flattened H*W positions are the tokens.
* ``resblock``: ``x' + proj(x)``, x' = (groupnorm -> silu -> conv) twice and
  proj a 1x1 conv only when channel counts differ.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F

GROUPS = 8
HEADS = 4

_check_finite = os.environ.get("VASC_CHECK_FINITE") == "1"


class ShapeError(ValueError):
    pass


def set_finite_checks(enabled: bool) -> None:
    global _check_finite
    _check_finite = bool(enabled)


def deterministic_requested() -> bool:
    return os.environ.get("VASC_DETERMINISTIC", "") not in ("", "0")


def configure_determinism(force: bool = False) -> bool:
    """Single-threaded, deterministic kernels when forced or VASC_DETERMINISTIC=1."""
    on = force or deterministic_requested()
    if on:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    return on


def _out(x: torch.Tensor, kind: str) -> torch.Tensor:
    if _check_finite and not torch.isfinite(x).all():
        raise FloatingPointError(f"{kind}: non-finite output")
    return x


class ParamSet:
    """Named parameter tensors with a recorded initialization scheme."""

    def __init__(self, seed: int = 0, dtype: torch.dtype = torch.float32):
        self.seed = int(seed)
        self.dtype = dtype
        self.scheme = "glorot_uniform weights, zero biases, unit norm gains"
        self.tensors: dict[str, torch.Tensor] = {}
        self._gen = torch.Generator().manual_seed(self.seed)

    def _add(self, name: str, value: torch.Tensor) -> torch.Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value.to(self.dtype).requires_grad_(True)
        self.tensors[name] = t
        return t

    def glorot(self, name: str, shape: tuple[int, ...], fan_in: int, fan_out: int) -> torch.Tensor:
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        u = torch.rand(shape, generator=self._gen, dtype=torch.float64)
        return self._add(name, (2 * u - 1) * bound)

    def zeros(self, name: str, shape: tuple[int, ...]) -> torch.Tensor:
        return self._add(name, torch.zeros(shape, dtype=torch.float64))

    def ones(self, name: str, shape: tuple[int, ...]) -> torch.Tensor:
        return self._add(name, torch.ones(shape, dtype=torch.float64))

    def scope(self, prefix: str) -> "Scope":
        return Scope(self, prefix)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def numel(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def to_numpy(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy() for k, v in self.tensors.items()}

    def load_numpy(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.tensors) - set(arrays)
        extra = set(arrays) - set(self.tensors)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        with torch.no_grad():
            for k, t in self.tensors.items():
                a = torch.as_tensor(np.asarray(arrays[k]))
                if tuple(a.shape) != tuple(t.shape):
                    raise ShapeError(f"{k}: expected shape {tuple(t.shape)}, got {tuple(a.shape)}")
                t.copy_(a.to(t.dtype))


@dataclass(frozen=True)
class Scope:
    params: ParamSet
    prefix: str

    def __getitem__(self, key: str) -> torch.Tensor:
        return self.params[f"{self.prefix}.{key}"]

    def __contains__(self, key: str) -> bool:
        return f"{self.prefix}.{key}" in self.params.tensors

    def scope(self, sub: str) -> "Scope":
        return Scope(self.params, f"{self.prefix}.{sub}")


# --- initializers -------------------------------------------------------------


def init_dense(ps: ParamSet, name: str, fan_in: int, fan_out: int, zero: bool = False) -> None:
    if zero:
        ps.zeros(f"{name}.w", (fan_in, fan_out))
    else:
        ps.glorot(f"{name}.w", (fan_in, fan_out), fan_in, fan_out)
    ps.zeros(f"{name}.b", (fan_out,))


def init_conv(ps: ParamSet, name: str, cin: int, cout: int, k: int = 3, zero: bool = False) -> None:
    if zero:
        ps.zeros(f"{name}.w", (cout, cin, k, k))
    else:
        ps.glorot(f"{name}.w", (cout, cin, k, k), cin * k * k, cout * k * k)
    ps.zeros(f"{name}.b", (cout,))


def init_groupnorm(ps: ParamSet, name: str, channels: int) -> None:
    ps.ones(f"{name}.g", (channels,))
    ps.zeros(f"{name}.b", (channels,))


def init_resblock(ps: ParamSet, name: str, cin: int, cout: int) -> None:
    init_groupnorm(ps, f"{name}.norm1", cin)
    init_conv(ps, f"{name}.conv1", cin, cout)
    init_groupnorm(ps, f"{name}.norm2", cout)
    init_conv(ps, f"{name}.conv2", cout, cout)
    if cin != cout:
        init_conv(ps, f"{name}.proj", cin, cout, k=1)


def init_mha(ps: ParamSet, name: str, channels: int) -> None:
    for part in ("q", "k", "v", "o"):
        init_dense(ps, f"{name}.{part}", channels, channels)


# --- layers -------------------------------------------------------------------


def silu(x: torch.Tensor) -> torch.Tensor:
    return _out(F.silu(x), "silu")


def dense(p: Scope, x: torch.Tensor) -> torch.Tensor:
    w = p["w"]
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"dense {p.prefix}: expected last dim {w.shape[0]}, got {x.shape[-1]}")
    return _out(x @ w + p["b"], "dense")


def _check_map(p: Scope, x: torch.Tensor, kind: str) -> None:
    cin = p["w"].shape[1]
    if x.dim() != 4 or x.shape[1] != cin:
        raise ShapeError(f"{kind} {p.prefix}: expected (B, {cin}, H, W), got {tuple(x.shape)}")


def conv2d(p: Scope, x: torch.Tensor) -> torch.Tensor:
    _check_map(p, x, "conv2d")
    k = p["w"].shape[-1]
    return _out(F.conv2d(x, p["w"], p["b"], padding=k // 2), "conv2d")


def down2(p: Scope, x: torch.Tensor) -> torch.Tensor:
    _check_map(p, x, "down2")
    if x.shape[-1] % 2 or x.shape[-2] % 2:
        raise ShapeError(f"down2 {p.prefix}: spatial dims must be even, got {tuple(x.shape[-2:])}")
    return _out(F.conv2d(x, p["w"], p["b"], stride=2, padding=1), "down2")


def up2(p: Scope, x: torch.Tensor) -> torch.Tensor:
    _check_map(p, x, "up2")
    x = x.repeat_interleave(2, dim=2).repeat_interleave(2, dim=3)
    return _out(F.conv2d(x, p["w"], p["b"], padding=1), "up2")


def groupnorm(p: Scope, x: torch.Tensor, groups: int = GROUPS) -> torch.Tensor:
    c = p["g"].shape[0]
    if x.dim() != 4 or x.shape[1] != c:
        raise ShapeError(f"groupnorm {p.prefix}: expected (B, {c}, H, W), got {tuple(x.shape)}")
    if c % groups:
        raise ShapeError(f"groupnorm {p.prefix}: {c} channels not divisible by {groups} groups")
    return _out(F.group_norm(x, groups, p["g"], p["b"], eps=1e-5), "groupnorm")


def resblock(p: Scope, x: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Residual block; ``bias`` (B, cout) is added to the features after the first conv."""
    h = conv2d(p.scope("conv1"), silu(groupnorm(p.scope("norm1"), x)))
    if bias is not None:
        if bias.shape != (h.shape[0], h.shape[1]):
            raise ShapeError(
                f"resblock {p.prefix}: expected bias shape {(h.shape[0], h.shape[1])}, got {tuple(bias.shape)}"
            )
        h = h + bias[:, :, None, None]
    h = conv2d(p.scope("conv2"), silu(groupnorm(p.scope("norm2"), h)))
    skip = conv2d(p.scope("proj"), x) if "proj.w" in p else x
    return _out(h + skip, "resblock")


def mha(p: Scope, tokens: torch.Tensor, heads: int = HEADS) -> torch.Tensor:
    """Multi-head self-attention over ``tokens`` of shape (B, N, C)."""
    if tokens.dim() != 3:
        raise ShapeError(f"mha {p.prefix}: expected (B, N, C), got {tuple(tokens.shape)}")
    b, n, c = tokens.shape
    if c % heads:
        raise ShapeError(f"mha {p.prefix}: {c} channels not divisible by {heads} heads")
    d = c // heads

    def split(t):
        return t.reshape(b, n, heads, d).transpose(1, 2)

    q, k, v = (split(dense(p.scope(s), tokens)) for s in ("q", "k", "v"))
    out = F.scaled_dot_product_attention(q, k, v).transpose(1, 2).reshape(b, n, c)
    return _out(dense(p.scope("o"), out), "mha")


def mha2d(p: Scope, x: torch.Tensor, heads: int = HEADS) -> torch.Tensor:
    b, c, h, w = x.shape
    tokens = x.reshape(b, c, h * w).transpose(1, 2)
    return mha(p, tokens, heads).transpose(1, 2).reshape(b, c, h, w)


LAYERS = {
    "dense": dense,
    "conv2d": conv2d,
    "resblock": resblock,
    "mha": mha,
    "groupnorm": groupnorm,
    "silu": lambda p, x: silu(x),
    "up2": up2,
    "down2": down2,
}


def layer_forward(kind: str, params: Scope | None, x: torch.Tensor, **kwargs) -> torch.Tensor:
    try:
        fn = LAYERS[kind]
    except KeyError:
        raise ValueError(f"unknown layer kind {kind!r}; expected one of {sorted(LAYERS)}") from None
    return fn(params, x, **kwargs)


# --- gradients and optimizer ----------------------------------------------------


def grad(loss: torch.Tensor, params: ParamSet) -> dict[str, torch.Tensor]:
    """Reverse-mode gradient of a scalar ``loss``; unconnected parameters get zeros."""
    if loss.numel() != 1:
        raise ValueError(f"grad needs a scalar loss, got shape {tuple(loss.shape)}")
    names = list(params)
    tensors = [params[n] for n in names]
    gs = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True)
    return {n: (torch.zeros_like(t) if g is None else g) for n, t, g in zip(names, tensors, gs)}


@dataclass
class AdamState:
    lr: float = 5e-4
    b1: float = 0.9
    b2: float = 0.999
    eps_hat: float = 1e-8
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamSet, **hyper) -> "AdamState":
        state = cls(**hyper)
        for k, t in params.items():
            state.m[k] = torch.zeros_like(t, requires_grad=False)
            state.v[k] = torch.zeros_like(t, requires_grad=False)
        return state


def adam_step(params: ParamSet, grads: dict[str, torch.Tensor], state: AdamState):
    """Bias-corrected Adam in the folded step-size form.

    lr_t = lr * sqrt(1 - b2^t) / (1 - b1^t); p -= lr_t * m / (sqrt(v) + eps_hat).
    """
    state.step += 1
    t = state.step
    lr_t = state.lr * math.sqrt(1 - state.b2**t) / (1 - state.b1**t)
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeError(f"adam {name}: expected gradient shape {tuple(p.shape)}, got {tuple(g.shape)}")
            m = state.m.setdefault(name, torch.zeros_like(p))
            v = state.v.setdefault(name, torch.zeros_like(p))
            m.mul_(state.b1).add_(g, alpha=1 - state.b1)
            v.mul_(state.b2).addcmul_(g, g, value=1 - state.b2)
            p.sub_(lr_t * m / (v.sqrt() + state.eps_hat))
    return params, state


def adam_state_arrays(state: AdamState) -> dict[str, np.ndarray]:
    out = {"step": np.array([state.step], dtype=np.float32)}
    for k in state.m:
        out[f"m.{k}"] = state.m[k].detach().numpy()
        out[f"v.{k}"] = state.v[k].detach().numpy()
    return out


def adam_state_from_arrays(arrays: dict[str, np.ndarray], params: ParamSet, **hyper) -> AdamState:
    state = AdamState.for_params(params, **hyper)
    state.step = int(arrays["step"][0])
    for k in state.m:
        state.m[k] = torch.as_tensor(np.array(arrays[f"m.{k}"])).to(params[k].dtype)
        state.v[k] = torch.as_tensor(np.array(arrays[f"v.{k}"])).to(params[k].dtype)
    return state

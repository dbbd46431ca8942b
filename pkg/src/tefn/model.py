"""TEFN forward computation and its ablation variants.

Shapes: a batch of lookback windows is ``(B, L_in, C)``. The time projection
stretches every channel to ``L = L_in + L_pred`` steps, each BPA branch adds
an event axis of size ``K`` (``2**S``, or 1 in probability mode), and fusion
sums that axis away. Only the last ``L_pred`` steps are returned.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import seeding

ACTIVATIONS = ("none", "relu", "tanh")
BPA_MODES = ("bpa", "prob")
FUSION_MODES = ("sum", "concat")


class ShapeMismatch(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TefnConfig:
    L_in: int = 96
    L_pred: int = 96
    C: int = 7
    S: int = 1
    use_norm: bool = True
    use_time_branch: bool = True
    use_channel_branch: bool = True
    bpa_mode: str = "bpa"
    fusion_mode: str = "sum"
    activation: str = "none"
    eps: float = 1e-5
    # projection only, no BPA and no fusion: the nonlinearity probe
    linear_probe: bool = False

    def __post_init__(self):
        for name in ("L_in", "L_pred", "C"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0 <= self.S <= 16:
            raise ConfigError(f"S must be in [0, 16], got {self.S}")
        if self.bpa_mode not in BPA_MODES:
            raise ConfigError(f"bpa_mode must be one of {BPA_MODES}, got {self.bpa_mode!r}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if not self.eps > 0:
            raise ConfigError("eps must be positive")
        if not self.linear_probe:
            if not (self.use_time_branch or self.use_channel_branch):
                raise ConfigError("at least one BPA branch must be enabled")
            if self.fusion_mode == "concat" and not (self.use_time_branch and self.use_channel_branch):
                raise ConfigError("concat fusion needs both branches")

    @property
    def L_total(self) -> int:
        return self.L_in + self.L_pred

    @property
    def n_events(self) -> int:
        return 1 if self.bpa_mode == "prob" else 2**self.S

    def replace(self, **changes) -> "TefnConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d) -> "TefnConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TefnParams:
    """Parameter tensors. Gradients use the same container."""

    W_p: np.ndarray  # (L_in, L)
    b_p: np.ndarray  # (L,)
    w_T: np.ndarray  # (L, K)
    b_T: np.ndarray  # (L, K)
    w_C: np.ndarray  # (C, K)
    b_C: np.ndarray  # (C, K)
    W_f: np.ndarray | None = None  # (2K, 1), concat fusion only
    b_f: np.ndarray | None = None  # (1,)

    def tensors(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)
                if getattr(self, f.name) is not None}

    @classmethod
    def from_tensors(cls, tensors) -> "TefnParams":
        return cls(**tensors)

    def copy(self) -> "TefnParams":
        return TefnParams.from_tensors({k: v.copy() for k, v in self.tensors().items()})

    def zeros_like(self) -> "TefnParams":
        return TefnParams.from_tensors({k: np.zeros_like(v) for k, v in self.tensors().items()})

    def size(self) -> int:
        return sum(v.size for v in self.tensors().values())

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.tensors().values())

    def equals(self, other: "TefnParams") -> bool:
        a, b = self.tensors(), other.tensors()
        return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def param_shapes(config: TefnConfig) -> dict:
    L, K = config.L_total, config.n_events
    shapes = {
        "W_p": (config.L_in, L),
        "b_p": (L,),
        "w_T": (L, K),
        "b_T": (L, K),
        "w_C": (config.C, K),
        "b_C": (config.C, K),
    }
    if config.fusion_mode == "concat" and not config.linear_probe:
        shapes["W_f"] = (2 * K, 1)
        shapes["b_f"] = (1,)
    return shapes


def param_count(config: TefnConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


def init_params(config: TefnConfig, seed: int) -> TefnParams:
    """Uniform fan-in init for the projection, near-zero slopes for the BPA tables."""
    g = seeding.rng(seed, seeding.INIT)
    shapes = param_shapes(config)
    bound_p = 1.0 / np.sqrt(config.L_in)
    bound_bpa = 0.01 / np.sqrt(config.n_events)
    t = {
        "W_p": g.uniform(-bound_p, bound_p, shapes["W_p"]),
        "b_p": g.uniform(-bound_p, bound_p, shapes["b_p"]),
        "w_T": g.uniform(-bound_bpa, bound_bpa, shapes["w_T"]),
        "b_T": np.zeros(shapes["b_T"]),
        "w_C": g.uniform(-bound_bpa, bound_bpa, shapes["w_C"]),
        "b_C": np.zeros(shapes["b_C"]),
    }
    if "W_f" in shapes:
        bound_f = 1.0 / np.sqrt(shapes["W_f"][0])
        t["W_f"] = g.uniform(-bound_f, bound_f, shapes["W_f"])
        t["b_f"] = np.zeros(1)
    return TefnParams(**t)


def check_params(params: TefnParams, config: TefnConfig):
    want = param_shapes(config)
    got = {k: v.shape for k, v in params.tensors().items()}
    if got != want:
        raise ShapeMismatch(f"parameter shapes {got} do not match config {want}")


# ------------------------------------------------------------------ building blocks

class NormStats(NamedTuple):
    mu: np.ndarray
    sigma: np.ndarray


def instance_normalize(x, eps=1e-5):
    """Per-sample, per-channel standardization over the time axis."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-2, keepdims=True)
    sigma = np.sqrt(x.var(axis=-2, keepdims=True) + eps)
    return (x - mu) / sigma, NormStats(mu, sigma)


def denormalize(y_norm, stats: NormStats):
    return y_norm * stats.sigma + stats.mu


def time_project(x_norm, W_p, b_p):
    """Map each channel's time vector through one shared affine map: ``(..., L_in, C) -> (..., L, C)``."""
    x_norm = np.asarray(x_norm)
    if x_norm.shape[-2] != W_p.shape[0]:
        raise ShapeMismatch(f"input length {x_norm.shape[-2]} != projection rows {W_p.shape[0]}")
    out = np.matmul(np.swapaxes(x_norm, -1, -2), W_p) + b_p
    return np.swapaxes(out, -1, -2)


def bpa_expand(x, axis, w, b):
    """Per-element affine fan-out onto the event axis.

    ``axis="time"``: ``m[..., t, c, k] = w[t, k] * x[..., t, c] + b[t, k]``
    ``axis="channel"``: ``m[..., t, c, k] = w[c, k] * x[..., t, c] + b[c, k]``
    """
    x = np.asarray(x)
    if w.shape != b.shape:
        raise ShapeMismatch(f"slope {w.shape} and intercept {b.shape} differ")
    if axis == "time":
        if w.shape[0] != x.shape[-2]:
            raise ShapeMismatch(f"time BPA table has {w.shape[0]} rows, input has {x.shape[-2]} steps")
        return x[..., :, :, None] * w[:, None, :] + b[:, None, :]
    if axis == "channel":
        if w.shape[0] != x.shape[-1]:
            raise ShapeMismatch(f"channel BPA table has {w.shape[0]} rows, input has {x.shape[-1]} channels")
        return x[..., :, :, None] * w[None, :, :] + b[None, :, :]
    raise ValueError(f"axis must be 'time' or 'channel', got {axis!r}")


def apply_activation(m, mode):
    if mode == "none":
        return m
    if mode == "relu":
        return m + np.maximum(m, 0.0)
    if mode == "tanh":
        return m + np.tanh(m)
    raise ValueError(f"unknown activation {mode!r}")


def activation_grad(m, mode):
    """Derivative of ``apply_activation`` evaluated at the pre-activation ``m``."""
    if mode == "none":
        return None
    if mode == "relu":
        return 1.0 + (m > 0.0)
    th = np.tanh(m)
    return 2.0 - th * th


def expectation_fuse(m):
    return m.sum(axis=-1)


# ------------------------------------------------------------------ full model

@dataclass
class ForwardCache:
    x_norm: np.ndarray
    stats: NormStats | None
    z: np.ndarray
    pre: dict
    post: dict
    fused_in: np.ndarray | None


def _forward(x, params: TefnParams, config: TefnConfig):
    if x.shape[-2:] != (config.L_in, config.C):
        raise ShapeMismatch(f"input window shape {x.shape[-2:]} != ({config.L_in}, {config.C})")
    if config.use_norm:
        x_norm, stats = instance_normalize(x, config.eps)
    else:
        x_norm, stats = x, None
    z = time_project(x_norm, params.W_p, params.b_p)
    pre, post, fused_in = {}, {}, None
    if config.linear_probe:
        y = z
    else:
        if config.use_time_branch:
            pre["T"] = bpa_expand(z, "time", params.w_T, params.b_T)
        if config.use_channel_branch:
            pre["C"] = bpa_expand(z, "channel", params.w_C, params.b_C)
        for key, m in pre.items():
            post[key] = apply_activation(m, config.activation)
        if config.fusion_mode == "sum":
            y = sum(expectation_fuse(a) for a in post.values())
        else:
            fused_in = np.concatenate([post["T"], post["C"]], axis=-1)
            y = fused_in @ params.W_f[:, 0] + params.b_f[0]
    if stats is not None:
        y = denormalize(y, stats)
    return y[..., config.L_in:, :], ForwardCache(x_norm, stats, z, pre, post, fused_in)


def forward(x, params: TefnParams, config: TefnConfig):
    """Forecast ``(L_pred, C)`` from a ``(L_in, C)`` window (or a leading batch axis).

    Returns the forecast and the instance-normalization stats (``None`` when
    normalization is off).
    """
    y, cache = _forward(np.asarray(x, dtype=np.float64), params, config)
    return y, cache.stats


def predict(inputs, params, config, chunk=1024):
    """Batched forward over many windows, chunked to bound memory."""
    inputs = np.asarray(inputs, dtype=np.float64)
    out = np.empty((inputs.shape[0], config.L_pred, config.C))
    for s in range(0, inputs.shape[0], chunk):
        out[s : s + chunk] = _forward(inputs[s : s + chunk], params, config)[0]
    return out

"""Loss, hand-derived gradients, gradient checking, Adam and the training loop."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import seeding
from .model import (
    ConfigError,
    ShapeMismatch,
    TefnConfig,
    TefnParams,
    _forward,
    activation_grad,
    check_params,
    init_params,
    predict,
)

log = logging.getLogger(__name__)

LR_SCHEDULES = ("halve_per_epoch", "constant")


class NonFiniteLoss(ArithmeticError):
    def __init__(self, message, epoch=None, batch=None):
        where = "" if epoch is None else f" (epoch {epoch}, batch {batch})"
        super().__init__(message + where)
        self.epoch = epoch
        self.batch = batch


Gradients = TefnParams


def _check_pair(y, y_hat):
    y, y_hat = np.asarray(y, dtype=np.float64), np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ShapeMismatch(f"targets {y.shape} vs predictions {y_hat.shape}")
    if y.size == 0:
        raise ValueError("empty input")
    return y, y_hat


def mse(y, y_hat) -> float:
    y, y_hat = _check_pair(y, y_hat)
    return float(np.mean((y_hat - y) ** 2))


def mae(y, y_hat) -> float:
    y, y_hat = _check_pair(y, y_hat)
    return float(np.mean(np.abs(y_hat - y)))


def _unpack(batch):
    if hasattr(batch, "inputs"):
        return batch.inputs, batch.targets
    inputs, targets = batch
    return np.asarray(inputs, dtype=np.float64), np.asarray(targets, dtype=np.float64)


def backward(batch, params: TefnParams, config: TefnConfig):
    """Mean squared error over the batch and its exact gradient for every tensor.

    ``batch`` is a ``Windows`` or an ``(inputs, targets)`` pair of shape
    ``(B, L_in, C)`` / ``(B, L_pred, C)``. The normalization statistics depend
    only on the inputs, so no gradient flows through them.
    """
    inputs, targets = _unpack(batch)
    if inputs.shape[0] == 0:
        raise ValueError("empty batch")
    y_hat, cache = _forward(inputs, params, config)
    resid = y_hat - targets
    loss = float(np.mean(resid * resid))
    if not math.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss}")

    B, L_in, C = inputs.shape
    g_y = np.zeros((B, config.L_total, C))
    g_y[:, L_in:, :] = resid * (2.0 / resid.size)
    if cache.stats is not None:
        g_y *= cache.stats.sigma

    grads = params.zeros_like()
    z = cache.z
    if config.linear_probe:
        g_z = g_y
    else:
        g_z = np.zeros_like(z)
        if config.fusion_mode == "sum":
            g_post = {key: g_y[..., None] for key in cache.post}
        else:
            cat = cache.fused_in
            grads.W_f[:, 0] = np.tensordot(cat, g_y, axes=([0, 1, 2], [0, 1, 2]))
            grads.b_f[0] = g_y.sum()
            g_cat = g_y[..., None] * params.W_f[:, 0]
            K = config.n_events
            g_post = {"T": g_cat[..., :K], "C": g_cat[..., K:]}
        for key, g in g_post.items():
            d_act = activation_grad(cache.pre[key], config.activation)
            g_pre = g if d_act is None else g * d_act
            g_pre = np.broadcast_to(g_pre, cache.pre[key].shape)
            if key == "T":
                grads.w_T[...] = np.einsum("btck,btc->tk", g_pre, z, optimize=True)
                grads.b_T[...] = g_pre.sum(axis=(0, 2))
                g_z += np.einsum("btck,tk->btc", g_pre, params.w_T, optimize=True)
            else:
                grads.w_C[...] = np.einsum("btck,btc->ck", g_pre, z, optimize=True)
                grads.b_C[...] = g_pre.sum(axis=(0, 1))
                g_z += np.einsum("btck,ck->btc", g_pre, params.w_C, optimize=True)
    grads.W_p[...] = np.tensordot(cache.x_norm, g_z, axes=([0, 2], [0, 2]))
    grads.b_p[...] = g_z.sum(axis=(0, 2))
    if not grads.all_finite():
        raise NonFiniteLoss("non-finite gradient")
    return loss, grads


def loss_only(batch, params, config) -> float:
    inputs, targets = _unpack(batch)
    y_hat, _ = _forward(inputs, params, config)
    return float(np.mean((y_hat - targets) ** 2))


# ------------------------------------------------------------------ gradient check

@dataclass
class GradCheckReport:
    max_rel_error: dict
    tol: float
    coords_checked: int

    @property
    def worst_tensor(self):
        return max(self.max_rel_error, key=self.max_rel_error.get)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values())

    @property
    def passed(self) -> bool:
        return self.worst < self.tol

    def failing(self):
        return [k for k, v in self.max_rel_error.items() if v >= self.tol]


def finite_diff_check(params, batch, config, step=1e-5, tol=1e-4, grads=None,
                      max_coords=5000, seed=0) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    All coordinates are probed when the model has fewer than ``max_coords``
    parameters, otherwise a seeded subsample of ``max_coords`` of them.
    Relative error is ``|ga - gn| / max(|ga|, |gn|, 1e-8)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if grads is None:
        _, grads = backward(batch, params, config)
    work = params.copy()
    tensors = work.tensors()
    analytic = grads.tensors()
    total = work.size()
    g = seeding.rng(seed, "gradcheck")
    report, checked = {}, 0
    for name, arr in tensors.items():
        flat = arr.reshape(-1)
        if total < max_coords:
            coords = range(flat.size)
        else:
            n = max(1, round(max_coords * flat.size / total))
            coords = np.sort(g.choice(flat.size, size=min(n, flat.size), replace=False))
        worst = 0.0
        ga_flat = analytic[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            up = loss_only(batch, work, config)
            flat[i] = orig - step
            down = loss_only(batch, work, config)
            flat[i] = orig
            gn = (up - down) / (2.0 * step)
            ga = ga_flat[i]
            rel = abs(ga - gn) / max(abs(ga), abs(gn), 1e-8)
            worst = max(worst, rel)
            checked += 1
        report[name] = worst
    return GradCheckReport(report, tol, checked)


# ------------------------------------------------------------------ optimizer

@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: TefnParams, **kw) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in params.tensors().items()},
                   {k: np.zeros_like(a) for k, a in params.tensors().items()}, **kw)


def adam_step(params: TefnParams, grads: TefnParams, state: AdamState, lr: float):
    """One bias-corrected Adam update. Returns new params and state."""
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = {}, {}, {}
    g_all = grads.tensors()
    for k, p in params.tensors().items():
        g = g_all[k]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient {k} has shape {g.shape}, parameter {p.shape}")
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_p[k] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[k], new_v[k] = m, v
    return TefnParams.from_tensors(new_p), dataclasses.replace(state, m=new_m, v=new_v, t=t)


# ------------------------------------------------------------------ training loop

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    batch_size: int = 32
    max_epochs: int = 10
    patience: int = 3
    lr_schedule: str = "halve_per_epoch"
    seed: int = 2024

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, max_epochs and patience must be >= 1")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "halve_per_epoch":
            return self.lr * 0.5 ** (epoch - 1)
        return self.lr


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float
    lr: float
    seconds: float = field(compare=False)


HISTORY_FIELDS = ("epoch", "train_mse", "val_mse", "lr", "seconds")


def train(train_windows, val_windows, model_config: TefnConfig, train_config: TrainConfig,
          params: TefnParams | None = None):
    """Adam on batch MSE with early stopping on validation MSE.

    Returns the best parameters seen and the per-epoch history.
    """
    if len(train_windows) == 0 or len(val_windows) == 0:
        raise ValueError("train and validation windows must be nonempty")
    tc = train_config
    params = init_params(model_config, tc.seed) if params is None else params.copy()
    check_params(params, model_config)
    state = AdamState.zeros(params)
    X, Y = train_windows.inputs, train_windows.targets
    n = X.shape[0]
    best, best_val, stale = params.copy(), math.inf, 0
    history = []
    for epoch in range(1, tc.max_epochs + 1):
        t0 = time.perf_counter()
        lr = tc.lr_at(epoch)
        order = seeding.rng(tc.seed, seeding.SHUFFLE, epoch).permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, tc.batch_size)):
            idx = order[start : start + tc.batch_size]
            try:
                loss, grads = backward((X[idx], Y[idx]), params, model_config)
            except NonFiniteLoss as exc:
                raise NonFiniteLoss(str(exc), epoch, b) from None
            params, state = adam_step(params, grads, state, lr)
            total += loss * idx.size
        val = mse(val_windows.targets, predict(val_windows.inputs, params, model_config))
        if not math.isfinite(val):
            raise NonFiniteLoss("validation loss is not finite", epoch, None)
        rec = EpochRecord(epoch, total / n, val, lr, time.perf_counter() - t0)
        history.append(rec)
        log.info("epoch %d train %.6f val %.6f lr %.3g", epoch, rec.train_mse, val, lr)
        if val < best_val:
            best, best_val, stale = params.copy(), val, 0
        else:
            stale += 1
            if stale >= tc.patience:
                break
    return best, history


def write_history_csv(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_FIELDS)
        for r in history:
            w.writerow([r.epoch, repr(r.train_mse), repr(r.val_mse), repr(r.lr), f"{r.seconds:.6f}"])

"""Noise schedule, forward noising, the noise-prediction loss and reverse samplers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, ParameterError
from .imageops import patchify


@dataclass(frozen=True)
class NoiseSchedule:
    """``alpha_bar[t]`` is the cumulative product of (1 - beta) up to step t; index 0 is the clean sample."""

    T: int
    betas: np.ndarray  # length T + 1, betas[0] = 0
    alpha_bar: np.ndarray  # length T + 1, alpha_bar[0] = 1

    def validate(self):
        ab = self.alpha_bar
        if len(ab) != self.T + 1 or np.any(ab <= 0) or np.any(ab > 1):
            raise ParameterError("alpha_bar entries must lie in (0, 1]")
        if not np.all(np.diff(ab) < 0):
            raise ParameterError("alpha_bar must be strictly decreasing")
        if not 0.999 < ab[0] <= 1.0:
            raise ParameterError("alpha_bar[0] must be in (0.999, 1]")
        return self


def make_schedule(T_steps, beta_start=1e-4, beta_end=0.02):
    """Linear beta ramp from ``beta_start`` to ``beta_end`` over steps 1..T."""
    if int(T_steps) != T_steps or T_steps < 1:
        raise ParameterError(f"T must be a positive integer, got {T_steps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ParameterError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    T_steps = int(T_steps)
    betas = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T_steps)])
    alpha_bar = np.cumprod(1.0 - betas)
    return NoiseSchedule(T_steps, betas, alpha_bar).validate()


def _check_t(t, sched):
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > sched.T) or np.any(t != np.round(t)):
        raise ParameterError(f"timestep out of range 1..{sched.T}: {t}")
    return t.astype(np.int64)


def forward_diffuse(x0, t, eps, sched):
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps; ``t`` is a scalar or one step per sample."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise DimensionError(f"x0 {x0.shape} and eps {eps.shape} differ")
    t = _check_t(t, sched)
    ab = sched.alpha_bar[t]
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    out = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return out.astype(x0.dtype)


@dataclass
class DiffusionBatch:
    x0: np.ndarray
    t: np.ndarray
    eps: np.ndarray
    xt: np.ndarray
    alpha_bar: np.ndarray = None  # per-row alpha_bar[t], filled by make_batch


def make_batch(x0, sched, rng, t=None):
    x0 = np.asarray(x0, dtype=T.get_dtype())
    b = x0.shape[0]
    if t is None:
        t = rng.integers(1, sched.T + 1, size=b)
    t = _check_t(np.broadcast_to(t, (b,)), sched)
    eps = rng.standard_normal(x0.shape).astype(x0.dtype)
    return DiffusionBatch(x0, t, eps, forward_diffuse(x0, t, eps, sched), sched.alpha_bar[t])


def denoise_loss(model, batch, cond, weighting=None):
    """Mean squared error between the true and predicted noise (scalar Tensor).

    ``weighting="v"`` scales each row by 1 / alpha_bar[t]. For a skip-connected
    ("v") denoiser this is the plain MSE of the network output against
    v = sqrt(a) eps - sqrt(1 - a) x0; unweighted, the high-noise steps where
    the layout is decided would contribute almost nothing. The default follows
    the model's ``prediction`` setting.
    """
    cfg = model.config
    if weighting is None:
        weighting = getattr(cfg, "prediction", "eps")
    if weighting not in ("eps", "v"):
        raise ParameterError(f"weighting must be 'eps' or 'v', got {weighting!r}")
    pred = model.forward_tokens(batch.xt, batch.t, cond, batch.alpha_bar)
    target = T.Tensor(patchify(batch.eps, cfg.patch_size))
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} vs target {target.shape}")
    if weighting == "eps":
        return T.mse(pred, target)
    from .model import _row_alpha_bar

    b = pred.shape[0]
    w = 1.0 / _row_alpha_bar(batch.t, batch.alpha_bar, b).reshape(b, 1, 1)
    diff = T.sub(pred, target)
    w = T.Tensor(np.broadcast_to(w, pred.shape).astype(pred.data.dtype))
    return T.tmean(T.mul(T.mul(diff, diff), w))


def timestep_pairs(sched, steps):
    """Descending (t, t_prev) pairs from T to 0 in ``steps`` evenly spaced jumps."""
    if int(steps) != steps or steps < 1:
        raise ParameterError("steps must be a positive integer")
    if steps > sched.T:
        raise ParameterError(f"steps {steps} exceeds schedule length {sched.T}")
    ts = np.round(np.linspace(sched.T, 0, int(steps) + 1)).astype(np.int64)
    return list(zip(ts[:-1].tolist(), ts[1:].tolist()))


def initial_noise(seeds, shape):
    seeds = [int(s) for s in np.atleast_1d(seeds)]
    return np.stack([np.random.default_rng(s).standard_normal(shape) for s in seeds]).astype(np.float32), seeds


def sample(model, cond, sched, seed, steps=50, mode="ddim", clip=True, callback=None):
    """Run the reverse process and return x0 estimates of shape (B, C, H, W).

    ``seed`` is an int (batch of one) or one seed per condition row; every
    row's starting noise and ancestral noise come only from its own seed.
    ``mode`` is "ddim" (deterministic, eta = 0) or "ddpm" (ancestral).
    ``callback(step_index, t)`` runs before each network evaluation.
    """
    if mode not in ("ddim", "ddpm"):
        raise ParameterError(f"unknown sampler mode {mode!r}")
    cfg = model.config
    shape = (cfg.channels, cfg.image_size, cfg.image_size)
    x, seeds = initial_noise(seed, shape)
    if x.shape[0] != cond.batch:
        raise DimensionError(f"{x.shape[0]} seeds for a condition batch of {cond.batch}")
    rngs = [np.random.default_rng([s, 1]) for s in seeds]
    ab = sched.alpha_bar
    x = x.astype(np.float64)
    for k, (t, t_prev) in enumerate(timestep_pairs(sched, steps)):
        if callback is not None:
            callback(k, t)
        eps = model.predict_eps(x.astype(np.float32), np.full(x.shape[0], t), cond, ab[t]).astype(np.float64)
        a_t, a_p = ab[t], ab[t_prev]
        x0 = (x - np.sqrt(1.0 - a_t) * eps) / np.sqrt(a_t)
        if clip:
            x0 = np.clip(x0, -1.0, 1.0)
        if mode == "ddim" or t_prev == 0:
            if t_prev == 0:
                x = x0
            else:
                eps_hat = (x - np.sqrt(a_t) * x0) / np.sqrt(1.0 - a_t)
                x = np.sqrt(a_p) * x0 + np.sqrt(1.0 - a_p) * eps_hat
        else:
            beta = 1.0 - a_t / a_p
            mean = (np.sqrt(a_p) * beta / (1.0 - a_t)) * x0 + (np.sqrt(1.0 - beta) * (1.0 - a_p) / (1.0 - a_t)) * x
            var = beta * (1.0 - a_p) / (1.0 - a_t)
            noise = np.stack([r.standard_normal(shape) for r in rngs])
            x = mean + np.sqrt(var) * noise
    return x.astype(np.float32)

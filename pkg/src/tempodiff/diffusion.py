"""Cosine noise schedule, forward noising, the epsilon loss and ancestral sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import ParameterError


class NumericalError(FloatingPointError):
    """A NaN or Inf appeared; the message names the operation that produced it."""


def check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values detected in {where}")


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step tables indexed directly by the diffusion step ``t`` in ``1..T``.

    Index 0 holds the virtual step before any noise: ``alpha_bar[0] == 1`` and
    ``beta[0] == sigma[0] == 0``.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    s: float = 0.008
    beta_clip: float = 0.999

    def check_steps(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise IndexError(f"diffusion step out of range [1, {self.T}]: {t}")


def cosine_beta_schedule(T, s=0.008, beta_clip=0.999):
    if T < 2:
        raise ParameterError(f"need at least 2 diffusion steps, got {T}")

    def f(t):
        return math.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2

    f0 = f(0)
    ab_raw = np.array([f(t) / f0 for t in range(T + 1)])
    beta = np.zeros(T + 1)
    beta[1:] = np.minimum(1.0 - ab_raw[1:] / ab_raw[:-1], beta_clip)
    alpha = 1.0 - beta
    # recompute from the clipped betas so alpha_bar stays the exact running product
    alpha_bar = np.cumprod(alpha)
    var = np.zeros(T + 1)
    var[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar,
                         sigma=np.sqrt(var), s=s, beta_clip=beta_clip)


def _per_item(values, t, ndim):
    return values[np.asarray(t)].reshape((-1,) + (1,) * (ndim - 1))


def q_sample(x0, t, schedule, rng=None, eps=None):
    """Noise ``x0`` to step ``t`` (one step per batch item). Returns ``(xt, eps)``."""
    schedule.check_steps(t)
    if eps is None:
        eps = rng.standard_normal(x0.shape)
    ab = _per_item(schedule.alpha_bar, t, x0.ndim)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps, eps


def predict_x0(xt, t, eps, schedule):
    ab = _per_item(schedule.alpha_bar, t, xt.ndim)
    return (xt - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)


def simple_loss(eps, eps_pred, mask=None):
    """Mean squared error between true and predicted noise.

    With ``mask`` the mean runs over observed entries only.
    """
    sq = (eps - eps_pred) ** 2
    if mask is None:
        return float(sq.mean())
    return float((sq * mask).sum() / max(mask.sum(), 1.0))


def simple_loss_grad(eps, eps_pred, mask=None):
    """d(simple_loss)/d(eps_pred)."""
    diff = eps_pred - eps
    if mask is None:
        return 2.0 * diff / diff.size
    return 2.0 * diff * mask / max(mask.sum(), 1.0)


def p_sample_step(xt, t, eps_pred, schedule, rng=None, z=None):
    """One reverse step from ``t`` to ``t - 1``; the noise term is dropped at ``t == 1``."""
    schedule.check_steps(t)
    t = int(t)
    coef = schedule.beta[t] / math.sqrt(1.0 - schedule.alpha_bar[t])
    mean = (xt - coef * eps_pred) / math.sqrt(schedule.alpha[t])
    if t == 1:
        return mean
    if z is None:
        z = rng.standard_normal(xt.shape)
    return mean + schedule.sigma[t] * z


def sample_loop(model, schedule, n, y, M, rng, shape=None, batch_size=256,
                allow_untrained=False):
    """Ancestral sampling from pure noise down to step 1.

    ``model`` needs ``predict(xt, t, y, M)`` returning the eval-mode noise
    estimate; ``shape`` defaults to ``(model.config.T_seq, model.config.D)``.
    ``y`` may be one label or one per sequence, ``M`` one mask or one per
    sequence. Output stays in normalized space.
    """
    if not allow_untrained and not getattr(model, "trained", True):
        raise ParameterError("model is untrained; pass allow_untrained=True to sample anyway")
    if shape is None:
        shape = (model.config.T_seq, model.config.D)
    if n == 0:
        return np.zeros((0,) + tuple(shape))
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (n,))
    M = np.broadcast_to(np.asarray(M, dtype=np.float64), (n,) + tuple(shape))
    out = []
    for start in range(0, n, batch_size):
        sl = slice(start, min(start + batch_size, n))
        yb, Mb = y[sl], M[sl]
        x = rng.standard_normal((len(yb),) + tuple(shape))
        for t in range(schedule.T, 0, -1):
            tv = np.full(len(yb), t, dtype=np.int64)
            eps_pred = model.predict(x, tv, yb, Mb)
            x = p_sample_step(x, t, eps_pred, schedule, rng)
            if t % 100 == 0 or t == 1:
                check_finite(x, f"sample_loop (reverse step t={t})")
        out.append(x)
    return np.concatenate(out, axis=0)

"""Fixed-graph tensor ops with hand-written backward passes.

Activations are float64 arrays shaped ``(batch, time, features)``. Every
``*_backward`` returns the gradient w.r.t. its input and *accumulates* into the
``grad`` of any :class:`Param` it touched, so call :func:`zero_grad` between
optimizer steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    pass


class ParameterError(ValueError):
    pass


@dataclass
class Param:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0.0)


def zero_grad(params):
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# Linear
# ---------------------------------------------------------------------------

def linear_forward(x, W, b):
    """Per-timestep affine map ``W @ x[b, t] + b``."""
    if x.ndim != 3 or x.shape[-1] != W.shape[1]:
        raise DimensionError(f"linear: input shape {x.shape} incompatible with weight shape {W.shape}")
    B, T, d_in = x.shape
    out = x.reshape(-1, d_in) @ W.value.T + b.value
    return out.reshape(B, T, -1)


def linear_backward(x, W, b, grad_out):
    expected = x.shape[:-1] + (W.shape[0],)
    if grad_out.shape != expected:
        raise DimensionError(f"linear backward: grad_out shape {grad_out.shape} != output shape {expected}")
    g2 = grad_out.reshape(-1, W.shape[0])
    W.grad += g2.T @ x.reshape(-1, W.shape[1])
    b.grad += g2.sum(axis=0)
    return (g2 @ W.value).reshape(x.shape)


# ---------------------------------------------------------------------------
# Conv1D, kernel width 3, zero "same" padding along time
# ---------------------------------------------------------------------------

def _im2col(x):
    """(B, T, D) -> (B*T, 3*D) rows holding [x[t-1] | x[t] | x[t+1]] with zero padding."""
    B, T, D = x.shape
    cols = np.zeros((B, T, 3, D))
    cols[:, 1:, 0] = x[:, :-1]
    cols[:, :, 1] = x
    cols[:, :-1, 2] = x[:, 1:]
    return cols.reshape(B * T, 3 * D)


def _flat_kernel(K):
    # (D_out, D_in, 3) -> (D_out, 3*D_in) matching the _im2col column order
    return K.transpose(0, 2, 1).reshape(K.shape[0], -1)


def conv1d_forward(x, K, b):
    if x.ndim != 3 or x.shape[1] < 1:
        raise DimensionError(f"conv1d: expected (B, T>=1, D) input, got {x.shape}")
    d_out, d_in, width = K.shape
    if width != 3 or x.shape[-1] != d_in:
        raise DimensionError(f"conv1d: input shape {x.shape} incompatible with kernel shape {K.shape}")
    B, T, _ = x.shape
    out = _im2col(x) @ _flat_kernel(K.value).T + b.value
    return out.reshape(B, T, d_out)


def conv1d_backward(x, K, b, grad_out):
    d_out, d_in, _ = K.shape
    B, T, _ = x.shape
    if grad_out.shape != (B, T, d_out):
        raise DimensionError(f"conv1d backward: grad_out shape {grad_out.shape} != output shape {(B, T, d_out)}")
    g2 = grad_out.reshape(-1, d_out)
    K.grad += (g2.T @ _im2col(x)).reshape(d_out, 3, d_in).transpose(0, 2, 1)
    b.grad += g2.sum(axis=0)
    gcols = (g2 @ _flat_kernel(K.value)).reshape(B, T, 3, d_in)
    grad_x = gcols[:, :, 1].copy()
    grad_x[:, :-1] += gcols[:, 1:, 0]
    grad_x[:, 1:] += gcols[:, :-1, 2]
    return grad_x


# ---------------------------------------------------------------------------
# Pointwise
# ---------------------------------------------------------------------------

def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(x, grad_out):
    # subgradient at exactly 0 is 0
    return grad_out * (x > 0)


def dropout(x, rate, training, rng):
    """Inverted dropout. Returns ``(out, mask)``; mask is ``None`` when inactive."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


def dropout_backward(mask, grad_out):
    return grad_out if mask is None else grad_out * mask


def sinusoidal_pe(position, dim):
    if dim <= 0 or dim % 2:
        raise ParameterError(f"positional-encoding dim must be even and positive, got {dim}")
    if position < 0:
        raise ParameterError(f"position must be nonnegative, got {position}")
    return sinusoidal_table(position + 1, dim)[position]


def sinusoidal_table(length, dim):
    """Rows are ``sinusoidal_pe(0..length-1, dim)``."""
    if dim <= 0 or dim % 2:
        raise ParameterError(f"positional-encoding dim must be even and positive, got {dim}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    freq = 10000.0 ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    table = np.empty((length, dim))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    return table


# ---------------------------------------------------------------------------
# Embedding
# ---------------------------------------------------------------------------

def embedding_lookup(table, index):
    index = np.asarray(index)
    V = table.shape[0]
    if np.any(index < 0) or np.any(index >= V):
        raise IndexError(f"embedding index out of range [0, {V}): {index}")
    return table.value[index]


def embedding_backward(table, index, grad_out):
    np.add.at(table.grad, np.asarray(index), grad_out)


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------

@dataclass
class AdamWState:
    m: dict
    v: dict
    step: int = 0
    lr0: float = 1e-3
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, **hyper):
        return cls(m={p.name: np.zeros_like(p.value) for p in params},
                   v={p.name: np.zeros_like(p.value) for p in params}, **hyper)


def adamw_step(params, state, lr):
    """One AdamW update with decay applied straight to the weights."""
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for p in params:
        m, v = state.m[p.name], state.v[p.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * p.grad
        v *= state.beta2
        v += (1.0 - state.beta2) * p.grad * p.grad
        if state.weight_decay:
            p.value *= 1.0 - lr * state.weight_decay
        p.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass(frozen=True)
class LRSchedule:
    base_lr: float
    total_steps: int
    warmup_steps: int = 0


def cosine_lr(step, schedule):
    if schedule.warmup_steps and step < schedule.warmup_steps:
        return schedule.base_lr * (step + 1) / schedule.warmup_steps
    span = max(schedule.total_steps - schedule.warmup_steps, 1)
    progress = min((step - schedule.warmup_steps) / span, 1.0)
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_grad_norm(params):
    return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))


def clip_grad_norm(params, max_norm=1.0):
    """Rescale all grads so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_grad_norm(params)
    # slack keeps a second call a no-op despite rounding in the rescaled norm
    if norm > max_norm * (1.0 + 1e-12):
        scale = max_norm / norm
        for p in params:
            p.grad *= scale
    return norm

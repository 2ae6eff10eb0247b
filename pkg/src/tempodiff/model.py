"""The conditional noise predictor eps(x_t, t, y, M).

Layout per sequence position::

    [x_t | t_emb[t] | c_emb[y] | M] -> Linear -> ReLU
        -> adapter block(s): (+ sinusoidal PE over sequence positions)
           Conv1D(k=3) -> ReLU -> Dropout -> Conv1D(k=3) -> ReLU -> Dropout -> Linear
        -> Linear -> ReLU -> Linear  (noise estimate, D channels)

With ``adapters_enabled=False`` the adapter block is skipped and the network is
a plain per-position MLP.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .nn import Param, ParameterError


@dataclass(frozen=True)
class DenoiserConfig:
    D: int = 3
    T_seq: int = 100
    T_diffusion: int = 1000
    d_t: int = 32
    d_c: int = 16
    n_classes: int = 6
    d_hidden: int = 128
    dropout_rate: float = 0.1
    adapters_enabled: bool = True
    n_adapters: int = 1
    # "each": dropout after both adapter ReLUs; "last": only after the second
    dropout_placement: str = "each"

    def __post_init__(self):
        for name in ("D", "T_seq", "T_diffusion", "d_t", "d_c", "n_classes", "d_hidden", "n_adapters"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_t % 2:
            raise ParameterError(f"d_t must be even, got {self.d_t}")
        if self.d_hidden % 2:
            raise ParameterError(f"d_hidden must be even for the positional encoding, got {self.d_hidden}")
        if self.dropout_placement not in ("each", "last"):
            raise ParameterError(f"dropout_placement must be 'each' or 'last', got {self.dropout_placement!r}")

    @property
    def input_width(self):
        return self.D + self.d_t + self.d_c + self.D

    def to_dict(self):
        return asdict(self)


def param_count(config):
    """Closed-form number of scalar weights for ``config``."""
    h, D = config.d_hidden, config.D
    n = config.T_diffusion * config.d_t + config.n_classes * config.d_c
    n += h * config.input_width + h
    if config.adapters_enabled:
        n += config.n_adapters * (2 * (3 * h * h + h) + h * h + h)
    n += h * h + h + D * h + D
    return n


def _param_shapes(config):
    h = config.d_hidden
    shapes = [("t_emb", (config.T_diffusion, config.d_t)),
              ("c_emb", (config.n_classes, config.d_c)),
              ("in.W", (h, config.input_width)), ("in.b", (h,))]
    if config.adapters_enabled:
        for a in range(config.n_adapters):
            shapes += [(f"adapter{a}.conv1.K", (h, h, 3)), (f"adapter{a}.conv1.b", (h,)),
                       (f"adapter{a}.conv2.K", (h, h, 3)), (f"adapter{a}.conv2.b", (h,)),
                       (f"adapter{a}.proj.W", (h, h)), (f"adapter{a}.proj.b", (h,))]
    shapes += [("mlp1.W", (h, h)), ("mlp1.b", (h,)),
               ("mlp2.W", (config.D, h)), ("mlp2.b", (config.D,))]
    return shapes


def init_params(config, rng):
    """Glorot-uniform weights, zero biases, N(0, 0.02^2) embedding tables."""
    params = {}
    for name, shape in _param_shapes(config):
        if name in ("t_emb", "c_emb"):
            value = rng.normal(0.0, 0.02, shape)
        elif name.endswith(".b"):
            value = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            fan_out = shape[0] * (shape[2] if len(shape) == 3 else 1)
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            value = rng.uniform(-bound, bound, shape)
        params[name] = Param(name, value)
    return params


class Denoiser:
    def __init__(self, config, params=None, rng=None):
        self.config = config
        if params is None:
            params = init_params(config, rng if rng is not None else np.random.default_rng(0))
        self.params = params
        self.trained = False
        self._pe = nn.sinusoidal_table(config.T_seq, config.d_hidden)

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        nn.zero_grad(self.parameters())

    # -- input fusion -----------------------------------------------------

    def build_input(self, xt, t, y, M):
        cfg, P = self.config, self.params
        B, T, _ = xt.shape
        t = np.asarray(t, dtype=np.int64)
        y = np.asarray(y, dtype=np.int64)
        if xt.shape[-1] != cfg.D or M.shape != xt.shape:
            raise nn.DimensionError(f"x_t shape {xt.shape} / mask shape {M.shape} do not match D={cfg.D}")
        if np.any(t < 1) or np.any(t > cfg.T_diffusion):
            raise IndexError(f"diffusion step out of range [1, {cfg.T_diffusion}]: {t}")
        if np.any(y < 0) or np.any(y >= cfg.n_classes):
            raise IndexError(f"label out of range [0, {cfg.n_classes}): {y}")
        te = nn.embedding_lookup(P["t_emb"], t - 1)
        ce = nn.embedding_lookup(P["c_emb"], y)
        return np.concatenate([xt,
                               np.broadcast_to(te[:, None, :], (B, T, cfg.d_t)),
                               np.broadcast_to(ce[:, None, :], (B, T, cfg.d_c)),
                               M], axis=-1)

    # -- adapter ----------------------------------------------------------

    def adapter_forward(self, h, index=0, training=False, rng=None):
        """One temporal adapter block; returns ``(out, cache)``."""
        cfg, P = self.config, self.params
        if not cfg.adapters_enabled:
            return h, None
        pre = f"adapter{index}."
        T = h.shape[1]
        pe = self._pe if T == cfg.T_seq else nn.sinusoidal_table(T, cfg.d_hidden)
        hp = h + pe
        c1 = nn.conv1d_forward(hp, P[pre + "conv1.K"], P[pre + "conv1.b"])
        r1 = nn.relu(c1)
        rate1 = cfg.dropout_rate if cfg.dropout_placement == "each" else 0.0
        d1, m1 = nn.dropout(r1, rate1, training, rng)
        c2 = nn.conv1d_forward(d1, P[pre + "conv2.K"], P[pre + "conv2.b"])
        r2 = nn.relu(c2)
        d2, m2 = nn.dropout(r2, cfg.dropout_rate, training, rng)
        out = nn.linear_forward(d2, P[pre + "proj.W"], P[pre + "proj.b"])
        return out, (pre, hp, c1, m1, d1, c2, m2, d2)

    def adapter_backward(self, cache, grad_out):
        if cache is None:
            return grad_out
        P = self.params
        pre, hp, c1, m1, d1, c2, m2, d2 = cache
        g = nn.linear_backward(d2, P[pre + "proj.W"], P[pre + "proj.b"], grad_out)
        g = nn.relu_backward(c2, nn.dropout_backward(m2, g))
        g = nn.conv1d_backward(d1, P[pre + "conv2.K"], P[pre + "conv2.b"], g)
        g = nn.relu_backward(c1, nn.dropout_backward(m1, g))
        return nn.conv1d_backward(hp, P[pre + "conv1.K"], P[pre + "conv1.b"], g)

    # -- full network ----------------------------------------------------

    def forward(self, xt, t, y, M, training=False, rng=None):
        """Noise estimate of shape ``xt.shape`` plus the cache for :meth:`backward`."""
        P = self.params
        inp = self.build_input(xt, t, y, M)
        z0 = nn.linear_forward(inp, P["in.W"], P["in.b"])
        h = nn.relu(z0)
        adapter_caches = []
        if self.config.adapters_enabled:
            for a in range(self.config.n_adapters):
                h, c = self.adapter_forward(h, a, training, rng)
                adapter_caches.append(c)
        z1 = nn.linear_forward(h, P["mlp1.W"], P["mlp1.b"])
        h1 = nn.relu(z1)
        out = nn.linear_forward(h1, P["mlp2.W"], P["mlp2.b"])
        cache = dict(t=np.asarray(t), y=np.asarray(y), inp=inp, z0=z0,
                     adapters=adapter_caches, h=h, z1=z1, h1=h1)
        return out, cache

    def backward(self, cache, grad_out):
        """Accumulate parameter grads; returns the gradient w.r.t. ``x_t``."""
        cfg, P = self.config, self.params
        g = nn.linear_backward(cache["h1"], P["mlp2.W"], P["mlp2.b"], grad_out)
        g = nn.relu_backward(cache["z1"], g)
        g = nn.linear_backward(cache["h"], P["mlp1.W"], P["mlp1.b"], g)
        for c in reversed(cache["adapters"]):
            g = self.adapter_backward(c, g)
        g = nn.relu_backward(cache["z0"], g)
        g_inp = nn.linear_backward(cache["inp"], P["in.W"], P["in.b"], g)
        D, dt, dc = cfg.D, cfg.d_t, cfg.d_c
        nn.embedding_backward(P["t_emb"], cache["t"] - 1, g_inp[..., D:D + dt].sum(axis=1))
        nn.embedding_backward(P["c_emb"], cache["y"], g_inp[..., D + dt:D + dt + dc].sum(axis=1))
        return g_inp[..., :D]

    def predict(self, xt, t, y, M):
        return self.forward(xt, t, y, M, training=False)[0]

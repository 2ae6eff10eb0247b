"""Run configuration: one flat record of every tunable, read from ``key = value`` files.

Precedence is command-line flags > config file > defaults.  Unknown keys are
an error so that typos never silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # data
    T_seq: int = 100
    overlap: int = 50
    gap_factor: float = 10.0
    n_quantiles: int = 1000
    missing_rate: float = 0.0
    test_frac: float = 0.2
    val_frac: float = 0.2
    users: str = ""
    toy_classes: int = 3
    toy_channels: int = 3
    toy_noise: float = 0.1
    # diffusion
    T_diffusion: int = 1000
    schedule_s: float = 0.008
    beta_clip: float = 0.999
    # model
    d_t: int = 32
    d_c: int = 16
    d_hidden: int = 128
    dropout_rate: float = 0.1
    dropout_placement: str = "each"
    adapters_enabled: bool = True
    n_adapters: int = 1
    # training
    lr: float = 1e-3
    weight_decay: float = 1e-5
    warmup_steps: int = 0
    epochs: int = 50
    max_steps: int = 0
    batch_size: int = 64
    clip_norm: float = 1.0
    patience: int = 10
    min_delta: float = 1e-4
    mask_loss: bool = False
    # sampling
    sample_batch: int = 256
    # evaluation and baselines
    n_bins: int = 20
    max_lag: int = 50
    n_trees: int = 100
    max_depth: int = 0
    min_samples_leaf: int = 1
    smote_k: int = 5

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **changes):
        return parse_items(changes.items(), base=self)

    def dumps(self):
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.to_dict().items())

    def user_list(self):
        return [int(u) for u in self.users.replace(";", ",").split(",") if u.strip()] or None


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(key, value):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    kind = type(_FIELDS[key].default)
    if not isinstance(value, str):
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, kind):
            return value
        raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}")
    text = value.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "on", "yes", "1"):
                return True
            if low in ("false", "off", "no", "0"):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {kind.__name__}") from None


def parse_items(items, base=None):
    """Overlay ``(key, value)`` pairs on ``base`` (defaults when None)."""
    values = (base or RunConfig()).to_dict()
    for k, v in items:
        values[k.strip()] = _coerce(k.strip(), v)
    return RunConfig(**values)


def parse_text(text, base=None):
    items = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        k, v = line.split("=", 1)
        items.append((k, v))
    return parse_items(items, base)


def load_config(path=None, overrides=(), base=None):
    """Defaults, then the file at ``path``, then ``overrides`` (``key=value`` strings or pairs)."""
    cfg = base or RunConfig()
    if path is not None:
        with open(path) as fh:
            cfg = parse_text(fh.read(), cfg)
    pairs = []
    for item in overrides:
        if isinstance(item, str):
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            item = item.split("=", 1)
        pairs.append(tuple(item))
    return parse_items(pairs, cfg)

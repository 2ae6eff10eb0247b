"""Training loop for the denoiser: batching, AdamW + cosine LR, early stopping."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .diffusion import check_finite, q_sample, simple_loss, simple_loss_grad
from .nn import AdamWState, LRSchedule, ParameterError

log = logging.getLogger(__name__)


@dataclass
class TrainArrays:
    """Stacked training triplets: ``x0`` and ``M`` are (N, T, D), ``y`` is (N,)."""

    x0: np.ndarray
    y: np.ndarray
    M: np.ndarray

    def __len__(self):
        return len(self.y)

    @classmethod
    def from_windows(cls, windows):
        if not windows:
            return cls(np.zeros((0, 0, 0)), np.zeros(0, dtype=np.int64), np.zeros((0, 0, 0)))
        return cls(np.stack([w.x0 for w in windows]),
                   np.array([w.y for w in windows], dtype=np.int64),
                   np.stack([w.M for w in windows]).astype(np.float64))


@dataclass
class TrainState:
    optimizer: AdamWState
    lr_schedule: LRSchedule
    rng: np.random.Generator
    epoch: int = 0
    history: list = field(default_factory=list)


def new_train_state(model, total_steps, seed=0, lr=1e-3, weight_decay=1e-5, warmup_steps=0):
    return TrainState(
        optimizer=AdamWState.for_params(model.parameters(), lr0=lr, weight_decay=weight_decay),
        lr_schedule=LRSchedule(base_lr=lr, total_steps=max(int(total_steps), 1), warmup_steps=warmup_steps),
        rng=np.random.default_rng(seed),
    )


def batch_loss_and_grad(model, schedule, x0, y, M, rng, training=True, mask_loss=False):
    """Forward + backward on one batch; grads are accumulated into the model."""
    t = rng.integers(1, schedule.T + 1, size=len(y))
    xt, eps = q_sample(x0, t, schedule, rng)
    pred, cache = model.forward(xt, t, y, M, training=training, rng=rng)
    mask = M if mask_loss else None
    loss = simple_loss(eps, pred, mask)
    model.backward(cache, simple_loss_grad(eps, pred, mask))
    return loss


def train_epoch(data, model, state, schedule, batch_size=64, clip_norm=1.0, mask_loss=False):
    """One shuffled pass over ``data``; returns the mean batch loss."""
    if len(data) == 0:
        raise ParameterError("cannot train on an empty dataset")
    rng = state.rng
    params = model.parameters()
    order = rng.permutation(len(data))
    losses = []
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        model.zero_grad()
        loss = batch_loss_and_grad(model, schedule, data.x0[idx], data.y[idx], data.M[idx], rng,
                                   mask_loss=mask_loss)
        nn.clip_grad_norm(params, clip_norm)
        lr = nn.cosine_lr(state.optimizer.step, state.lr_schedule)
        nn.adamw_step(params, state.optimizer, lr)
        for p in params:
            check_finite(p.value, f"adamw_step (parameter {p.name}, step {state.optimizer.step})")
        losses.append(loss)
    state.epoch += 1
    model.trained = True
    return float(np.mean(losses))


def evaluate_loss(data, model, schedule, seed=0, batch_size=256, mask_loss=False):
    """Eval-mode loss with a fixed noise/step draw, so epochs are comparable."""
    if len(data) == 0:
        return float("nan")
    rng = np.random.default_rng(seed)
    total, count = 0.0, 0
    for start in range(0, len(data), batch_size):
        sl = slice(start, start + batch_size)
        x0, y, M = data.x0[sl], data.y[sl], data.M[sl]
        t = rng.integers(1, schedule.T + 1, size=len(y))
        xt, eps = q_sample(x0, t, schedule, rng)
        pred = model.predict(xt, t, y, M)
        total += simple_loss(eps, pred, M if mask_loss else None) * len(y)
        count += len(y)
    return total / count


@dataclass(frozen=True)
class StopDecision:
    stop: bool
    stop_index: int | None
    best_index: int


def early_stopping(val_losses, patience=10, min_delta=1e-4):
    """Walk ``val_losses`` and decide whether training should have stopped.

    Patience resets only on an improvement larger than ``min_delta``. The best
    index is the argmin over the epochs seen before stopping.
    """
    losses = list(val_losses)
    if not losses:
        raise ParameterError("early stopping needs at least one validation loss")
    ref = losses[0]
    best = 0
    wait = 0
    for i in range(1, len(losses)):
        if losses[i] < losses[best]:
            best = i
        if losses[i] < ref - min_delta:
            ref = losses[i]
            wait = 0
        else:
            wait += 1
            if wait >= patience:
                return StopDecision(True, i, best)
    return StopDecision(False, None, best)


def fit(model, train, val, schedule, state, epochs=50, batch_size=64, clip_norm=1.0,
        patience=10, min_delta=1e-4, mask_loss=False, max_steps=None, val_seed=12345,
        restore_best=True, on_epoch=None):
    """Train for up to ``epochs`` epochs with early stopping on validation loss.

    Returns the loss curve as a list of ``(epoch, train_loss, val_loss)``.
    ``max_steps`` caps the total optimizer steps (counted across resumes).
    """
    best_val, best_params = np.inf, None
    while state.epoch < epochs:
        if max_steps is not None and state.optimizer.step >= max_steps:
            break
        train_loss = train_epoch(train, model, state, schedule, batch_size, clip_norm, mask_loss)
        val_loss = evaluate_loss(val, model, schedule, seed=val_seed, mask_loss=mask_loss) if len(val) else float("nan")
        row = (state.epoch, train_loss, val_loss)
        state.history.append(row)
        log.info("epoch %d  train %.5f  val %.5f", *row)
        if on_epoch is not None:
            on_epoch(row)
        if len(val):
            if val_loss < best_val:
                best_val = val_loss
                best_params = {k: p.value.copy() for k, p in model.params.items()}
            decision = early_stopping([r[2] for r in state.history], patience, min_delta)
            if decision.stop:
                log.info("early stop at epoch %d (best %d)", state.epoch, decision.best_index + 1)
                break
    if restore_best and best_params is not None:
        for k, v in best_params.items():
            model.params[k].value[...] = v
    return list(state.history)

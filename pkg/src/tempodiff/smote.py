"""SMOTE on whole windows and generator-driven class balancing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import SequenceWindow


class InsufficientDataError(ValueError):
    pass


@dataclass
class SmoteResult:
    samples: np.ndarray  # (n_new, T, D)
    base: np.ndarray  # index of the base window per sample
    neighbor: np.ndarray  # index of the interpolation partner
    lam: np.ndarray  # interpolation weight in [0, 1]
    neighbors: np.ndarray  # (n, k) nearest-neighbour table that was used


def nearest_neighbors(flat, k):
    """Indices of the ``k`` nearest other rows (Euclidean), nearest first, ties by index."""
    sq = (flat * flat).sum(axis=1)
    dist = sq[:, None] + sq[None, :] - 2.0 * flat @ flat.T
    np.fill_diagonal(dist, np.inf)
    return np.argsort(dist, axis=1, kind="stable")[:, :k]


def smote_oversample(windows, n_new, k=5, rng=None, lam=None):
    """Interpolate ``n_new`` synthetic windows inside one class.

    ``windows`` is an ``(n, T, D)`` array or a list of :class:`SequenceWindow`.
    ``lam`` overrides the random interpolation weights (scalar or per sample).
    """
    if len(windows) and isinstance(windows[0], SequenceWindow):
        arr = np.stack([w.x0 for w in windows])
    else:
        arr = np.asarray(windows, dtype=np.float64)
    n = len(arr)
    if n < 2:
        raise InsufficientDataError(f"SMOTE needs at least 2 windows in the class, got {n}")
    rng = rng if rng is not None else np.random.default_rng(0)
    k = min(k, n - 1)
    flat = arr.reshape(n, -1)
    nn_table = nearest_neighbors(flat, k)
    base = rng.integers(0, n, size=n_new)
    neighbor = nn_table[base, rng.integers(0, k, size=n_new)]
    if lam is None:
        lam = rng.random(n_new)
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (n_new,)).copy()
    samples = arr[base] + lam[:, None, None] * (arr[neighbor] - arr[base])
    return SmoteResult(samples, base, neighbor, lam, nn_table)


def smote_generator(train_windows, k=5, rng=None):
    """Wrap SMOTE as a ``generator(label, n) -> windows`` for :func:`balance_with_synthetic`."""
    rng = rng if rng is not None else np.random.default_rng(0)

    def generate(label, n):
        members = [w for w in train_windows if w.y == label]
        res = smote_oversample(members, n, k=k, rng=rng)
        return [SequenceWindow(s, label) for s in res.samples]

    return generate


def balance_additions(counts, target=None):
    counts = np.asarray(counts, dtype=np.int64)
    target = int(counts.max()) if target is None else int(target)
    return np.maximum(target - counts, 0)


def balance_with_synthetic(windows, generator, n_classes, target=None):
    """Top up every class below ``target`` (default: largest class) with generated windows.

    Returns ``(augmented, additions)``; real windows come first, untouched.
    """
    counts = np.bincount([w.y for w in windows], minlength=n_classes)
    additions = balance_additions(counts, target)
    augmented = list(windows)
    for label, extra in enumerate(additions):
        if extra:
            new = generator(label, int(extra))
            if len(new) != extra:
                raise ValueError(f"generator returned {len(new)} windows for class {label}, expected {extra}")
            augmented.extend(new)
    return augmented, additions

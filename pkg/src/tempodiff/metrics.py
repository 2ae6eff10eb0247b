"""Temporal and distributional fidelity metrics plus classification scores.

Sequence collections are arrays shaped ``(n_sequences, T, D)`` in original
units.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np


# ---------------------------------------------------------------------------
# Bigram transitions
# ---------------------------------------------------------------------------

@dataclass
class BigramMatrix:
    edges: np.ndarray
    counts: np.ndarray

    @property
    def n_bins(self):
        return len(self.edges) - 1

    @property
    def probs(self):
        rows = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, rows, out=np.zeros_like(self.counts, dtype=np.float64), where=rows > 0)

    @property
    def occupied_rows(self):
        return self.counts.sum(axis=1) > 0


def bigram_edges(sequences, channel, n_bins=20):
    """Equal-width bin edges spanning the pooled range of ``sequences[..., channel]``."""
    vals = np.asarray(sequences)[..., channel]
    lo, hi = float(vals.min()), float(vals.max())
    if hi <= lo:
        hi = lo + 1.0
    return np.linspace(lo, hi, n_bins + 1)


def quantize(values, edges):
    # out-of-range values fall into the edge bins
    return np.clip(np.searchsorted(edges, values, side="right") - 1, 0, len(edges) - 2)


def bigram_matrix(sequences, channel, edges):
    seqs = np.asarray(sequences, dtype=np.float64)
    n = len(edges) - 1
    counts = np.zeros((n, n))
    if seqs.size:
        q = quantize(seqs[..., channel], edges)
        np.add.at(counts, (q[:, :-1].ravel(), q[:, 1:].ravel()), 1.0)
    return BigramMatrix(np.asarray(edges), counts)


def bigram_distance(a, b):
    """Mean absolute difference of transition probabilities over rows occupied in either matrix."""
    rows = a.occupied_rows | b.occupied_rows
    if not rows.any():
        return 0.0
    return float(np.abs(a.probs[rows] - b.probs[rows]).mean())


# ---------------------------------------------------------------------------
# Autocorrelation
# ---------------------------------------------------------------------------

@dataclass
class AcfSeries:
    values: np.ndarray  # lags 0..max_lag
    n_sequences: int
    n_constant: int

    @property
    def max_lag(self):
        return len(self.values) - 1


def acf(sequences, channel, max_lag=50):
    """Biased per-sequence ACF averaged over sequences; zero-variance sequences are skipped."""
    x = np.asarray(sequences, dtype=np.float64)[..., channel]
    if x.ndim == 1:
        x = x[None, :]
    T = x.shape[1]
    max_lag = min(max_lag, T - 1)
    c = x - x.mean(axis=1, keepdims=True)
    denom = (c * c).sum(axis=1)
    live = denom > 1e-12 * np.maximum(1.0, np.abs(x).max(axis=1) ** 2) * T
    n_const = int((~live).sum())
    if not live.any():
        return AcfSeries(np.full(max_lag + 1, np.nan), 0, n_const)
    c, denom = c[live], denom[live]
    vals = np.empty(max_lag + 1)
    vals[0] = 1.0
    for lag in range(1, max_lag + 1):
        vals[lag] = np.mean((c[:, :-lag] * c[:, lag:]).sum(axis=1) / denom)
    return AcfSeries(vals, int(live.sum()), n_const)


def acf_distance(a, b, lags=None):
    """L1 distance between two ACF curves over lags ``1..L``."""
    L = min(a.max_lag, b.max_lag) if lags is None else lags
    return float(np.abs(a.values[1:L + 1] - b.values[1:L + 1]).sum())


# ---------------------------------------------------------------------------
# Marginals
# ---------------------------------------------------------------------------

def wasserstein1(real, synth):
    """1-Wasserstein distance between two 1-D empirical distributions.

    Integrates |F_real - F_synth| exactly over the merged support, so sample
    sizes may differ.
    """
    u = np.sort(np.asarray(real, dtype=np.float64).ravel())
    v = np.sort(np.asarray(synth, dtype=np.float64).ravel())
    if u.size == 0 or v.size == 0:
        raise ValueError("wasserstein1 needs two non-empty samples")
    if u.size == v.size:
        return float(np.abs(u - v).mean())
    grid = np.concatenate([u, v])
    grid.sort(kind="mergesort")
    widths = np.diff(grid)
    fu = np.searchsorted(u, grid[:-1], side="right") / u.size
    fv = np.searchsorted(v, grid[:-1], side="right") / v.size
    return float(np.sum(np.abs(fu - fv) * widths))


def time_shuffle(sequences, rng):
    """Independently permute the time axis of each sequence (marginals kept, order destroyed)."""
    seqs = np.array(sequences, dtype=np.float64, copy=True)
    for i in range(len(seqs)):
        seqs[i] = seqs[i][rng.permutation(seqs.shape[1])]
    return seqs


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------

@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows true, cols predicted

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def accuracy(self):
        return float(np.trace(self.counts) / self.total) if self.total else 0.0

    def precision(self):
        col = self.counts.sum(axis=0)
        return np.divide(np.diag(self.counts), col, out=np.zeros(len(col)), where=col > 0)

    def recall(self):
        row = self.counts.sum(axis=1)
        return np.divide(np.diag(self.counts), row, out=np.zeros(len(row)), where=row > 0)

    def f1(self):
        p, r = self.precision(), self.recall()
        return np.divide(2 * p * r, p + r, out=np.zeros(len(p)), where=(p + r) > 0)

    @property
    def macro_f1(self):
        return float(self.f1().mean())


def classification_report(true, pred, n_classes=None):
    true = np.asarray(true, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if n_classes is None:
        n_classes = int(max(true.max(initial=-1), pred.max(initial=-1))) + 1
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (true, pred), 1)
    cm = ConfusionMatrix(counts)
    missing = np.flatnonzero(counts.sum(axis=1) == 0)
    if missing.size:
        warnings.warn(f"classes {missing.tolist()} have no test support; their F1 counts as 0", stacklevel=2)
    return cm


# ---------------------------------------------------------------------------
# Report assembly
# ---------------------------------------------------------------------------

def _by_class(seqs, labels, cls):
    return seqs[labels == cls]


def temporal_report(real, real_labels, synth, synth_labels, class_names, channels=None,
                    n_bins=20, max_lag=50, seed=0):
    """Per-class, per-channel bigram / ACF / W1 distances, plus a time-shuffled-real baseline.

    Bin edges come from the pooled real data of each channel and are shared
    by every matrix compared on that channel.
    """
    real = np.asarray(real, dtype=np.float64)
    synth = np.asarray(synth, dtype=np.float64)
    real_labels = np.asarray(real_labels)
    synth_labels = np.asarray(synth_labels)
    channels = list(range(real.shape[2])) if channels is None else list(channels)
    rng = np.random.default_rng(seed)
    shuffled = time_shuffle(real, rng)
    lags = min(max_lag, real.shape[1] - 1)
    edges = {ch: bigram_edges(real, ch, n_bins) for ch in channels}

    per_class, baseline, matrices, acfs = {}, {}, {}, {}
    for cls, name in enumerate(class_names):
        r, s, sh = (_by_class(real, real_labels, cls), _by_class(synth, synth_labels, cls),
                    _by_class(shuffled, real_labels, cls))
        if len(r) == 0 or len(s) == 0:
            continue
        per_class[name], baseline[name] = {}, {}
        for ch in channels:
            br, bs, bsh = (bigram_matrix(x, ch, edges[ch]) for x in (r, s, sh))
            ar, as_, ash = (acf(x, ch, lags) for x in (r, s, sh))
            per_class[name][f"channel_{ch}"] = {
                "bigram_distance": bigram_distance(br, bs),
                "acf_distance": acf_distance(ar, as_, lags) if as_.n_sequences else None,
                "wasserstein1": wasserstein1(r[..., ch], s[..., ch]),
            }
            baseline[name][f"channel_{ch}"] = {
                "bigram_distance": bigram_distance(br, bsh),
                "acf_distance": acf_distance(ar, ash, lags),
                "wasserstein1": wasserstein1(r[..., ch], sh[..., ch]),
            }
            matrices[(name, ch)] = (br, bs)
            acfs[(name, ch)] = (ar, as_)
    overall = {f"channel_{ch}": wasserstein1(real[..., ch], synth[..., ch]) for ch in channels} if len(synth) else {}
    return EvalReport(per_class=per_class, shuffle_baseline=baseline, wasserstein1_pooled=overall,
                      bigram_matrices=matrices, acf_series=acfs,
                      histograms=_histograms(real, synth, channels, edges))


def _histograms(real, synth, channels, edges):
    out = {}
    for ch in channels:
        e = edges[ch]
        hr, _ = np.histogram(np.clip(real[..., ch], e[0], e[-1]), bins=e, density=True)
        hs = np.histogram(np.clip(synth[..., ch], e[0], e[-1]), bins=e, density=True)[0] if synth.size else np.zeros_like(hr)
        out[ch] = (e, hr, hs)
    return out


@dataclass
class EvalReport:
    per_class: dict
    shuffle_baseline: dict
    wasserstein1_pooled: dict
    config: dict = None
    confusion_matrix: ConfusionMatrix = None
    class_names: tuple = ()
    bigram_matrices: dict = None
    acf_series: dict = None
    histograms: dict = None

    def summary(self):
        """Means over classes and channels, used for side-by-side tables."""
        def mean_of(key, section):
            vals = [c[key] for cls in section.values() for c in cls.values() if c[key] is not None]
            return float(np.mean(vals)) if vals else None
        out = {"bigram_dist": mean_of("bigram_distance", self.per_class),
               "acf_dist": mean_of("acf_distance", self.per_class),
               "W1": mean_of("wasserstein1", self.per_class)}
        if self.confusion_matrix is not None:
            out["accuracy"] = self.confusion_matrix.accuracy
            out["macro_f1"] = self.confusion_matrix.macro_f1
        return out

    def to_dict(self):
        d = {"config": self.config or {}, "per_class": self.per_class,
             "shuffle_baseline": self.shuffle_baseline, "wasserstein1_pooled": self.wasserstein1_pooled}
        if self.confusion_matrix is not None:
            cm = self.confusion_matrix
            d["class_names"] = list(self.class_names)
            d["confusion_matrix"] = cm.counts.tolist()
            d["accuracy"] = cm.accuracy
            d["macro_f1"] = cm.macro_f1
            d["per_class_f1"] = {n: float(f) for n, f in zip(self.class_names, cm.f1())}
        return d

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def from_dict(cls, d):
        cm = ConfusionMatrix(np.array(d["confusion_matrix"], dtype=np.int64)) if "confusion_matrix" in d else None
        return cls(per_class=d["per_class"], shuffle_baseline=d["shuffle_baseline"],
                   wasserstein1_pooled=d.get("wasserstein1_pooled", {}), config=d.get("config"),
                   confusion_matrix=cm, class_names=tuple(d.get("class_names", ())))

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def write_plot_csvs(self, directory, prefix=""):
        """Long-format CSVs for bigram matrices, ACF curves and histograms."""
        from pathlib import Path
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / f"{prefix}bigram.csv", "w") as fh:
            fh.write("class,channel,source,row_bin,col_bin,prob\n")
            for (name, ch), (br, bs) in sorted((self.bigram_matrices or {}).items()):
                for source, m in (("real", br), ("synth", bs)):
                    p = m.probs
                    for i in range(m.n_bins):
                        for j in range(m.n_bins):
                            fh.write(f"{name},{ch},{source},{i},{j},{p[i, j]!r}\n")
        with open(directory / f"{prefix}acf.csv", "w") as fh:
            fh.write("class,channel,lag,value,source\n")
            for (name, ch), (ar, as_) in sorted((self.acf_series or {}).items()):
                for source, a in (("real", ar), ("synth", as_)):
                    for lag, v in enumerate(a.values):
                        fh.write(f"{name},{ch},{lag},{float(v)!r},{source}\n")
        with open(directory / f"{prefix}histogram.csv", "w") as fh:
            fh.write("channel,bin_left,bin_right,density,source\n")
            for ch, (e, hr, hs) in sorted((self.histograms or {}).items()):
                for source, h in (("real", hr), ("synth", hs)):
                    for i in range(len(h)):
                        fh.write(f"{ch},{e[i]!r},{e[i + 1]!r},{float(h[i])!r},{source}\n")

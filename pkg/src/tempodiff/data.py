"""Raw accelerometer ingestion, windowing, quantile normalization and splits."""

from __future__ import annotations

import csv
import hashlib
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import ndtr, ndtri

from .nn import ParameterError

log = logging.getLogger(__name__)

# label ids follow alphabetical order of the names
ACTIVITIES = ("Downstairs", "Jogging", "Sitting", "Standing", "Upstairs", "Walking")
ACTIVITY_ID = {name: i for i, name in enumerate(ACTIVITIES)}

CDF_EPS = 1e-7


class DataFormatError(ValueError):
    pass


class DegenerateDataError(ValueError):
    pass


@dataclass(frozen=True)
class RawRecord:
    user: int
    activity: int
    timestamp_ms: int
    x: float
    y: float
    z: float


@dataclass
class SequenceWindow:
    """One ``(x0, y, M)`` training triplet. ``user`` is metadata and never reaches the model."""

    x0: np.ndarray
    y: int
    M: np.ndarray = None
    user: int = -1

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        if self.M is None:
            self.M = np.ones_like(self.x0)


# ---------------------------------------------------------------------------
# Raw file parsing
# ---------------------------------------------------------------------------

def parse_line(line):
    """Parse ``user,activity,timestamp,x,y,z[;]``; returns ``None`` for anything malformed."""
    line = line.strip().rstrip(";").strip()
    if not line:
        return None
    parts = [p.strip() for p in line.split(",")]
    if len(parts) != 6 or parts[1] not in ACTIVITY_ID:
        return None
    try:
        user, ts = int(parts[0]), int(parts[2])
        x, y, z = float(parts[3]), float(parts[4]), float(parts[5])
    except ValueError:
        return None
    if ts < 0 or not np.isfinite([x, y, z]).all():
        return None
    return RawRecord(user, ACTIVITY_ID[parts[1]], ts, x, y, z)


def format_line(rec):
    return f"{rec.user},{ACTIVITIES[rec.activity]},{rec.timestamp_ms},{float(rec.x)!r},{float(rec.y)!r},{float(rec.z)!r};"


def parse_raw(path, users=None):
    """Read a WISDM-style raw file. Returns ``(records, n_skipped)``.

    Malformed lines and unknown activities are skipped and counted. ``users``
    keeps only the listed user ids (filtered lines are not counted as skipped).
    """
    keep = None if users is None else set(int(u) for u in users)
    records, skipped = [], 0
    try:
        fh = open(path, encoding="utf-8", errors="replace")
    except OSError as exc:
        raise OSError(f"cannot read raw file {path}: {exc}") from exc
    with fh:
        for line in fh:
            # some dumps pack several records on one line separated by ';'
            for chunk in line.split(";"):
                if not chunk.strip():
                    continue
                rec = parse_line(chunk)
                if rec is None:
                    skipped += 1
                elif keep is None or rec.user in keep:
                    records.append(rec)
    if skipped:
        log.warning("skipped %d malformed line(s) in %s", skipped, path)
    if not records:
        raise DataFormatError(f"no valid records in {path}")
    return records, skipped


# ---------------------------------------------------------------------------
# Windowing
# ---------------------------------------------------------------------------

def contiguous_runs(records, gap_factor=10.0):
    """Split records into per-user, time-ordered runs without large timestamp gaps.

    The nominal sampling period is the median positive timestamp step of each
    user, so the rule holds whatever unit the timestamps carry.
    """
    by_user = {}
    for r in records:
        by_user.setdefault(r.user, []).append(r)
    runs = []
    for user in sorted(by_user):
        recs = sorted(by_user[user], key=lambda r: r.timestamp_ms)
        ts = np.array([r.timestamp_ms for r in recs], dtype=np.float64)
        steps = np.diff(ts)
        positive = steps[steps > 0]
        period = float(np.median(positive)) if positive.size else 0.0
        breaks = np.flatnonzero(steps > gap_factor * period) + 1 if period > 0 else []
        for chunk in np.split(np.arange(len(recs)), breaks):
            runs.append([recs[i] for i in chunk])
    return runs


def window_offsets(length, T_seq=100, overlap=50):
    stride = T_seq - overlap
    if stride <= 0:
        raise ParameterError(f"overlap {overlap} must be smaller than window length {T_seq}")
    if length < T_seq:
        return []
    return list(range(0, (length - T_seq) // stride * stride + 1, stride))


def majority_label(labels, n_classes=len(ACTIVITIES)):
    # argmax returns the lowest id on ties
    return int(np.bincount(np.asarray(labels), minlength=n_classes).argmax())


def segment_windows(records, T_seq=100, overlap=50, gap_factor=10.0):
    """Cut overlapping windows from each contiguous run.

    Returns a list of ``SequenceWindow`` in raw units, labelled with the
    dominant activity of the window.
    """
    windows = []
    for run in contiguous_runs(records, gap_factor):
        values = np.array([(r.x, r.y, r.z) for r in run])
        labels = np.array([r.activity for r in run])
        for off in window_offsets(len(run), T_seq, overlap):
            windows.append(SequenceWindow(values[off:off + T_seq], majority_label(labels[off:off + T_seq]),
                                          user=run[0].user))
    return windows


# ---------------------------------------------------------------------------
# Quantile normalization
# ---------------------------------------------------------------------------

@dataclass
class QuantileMap:
    """Per-channel empirical quantiles mapped onto a standard normal."""

    references: np.ndarray  # (n_quantiles, D), non-decreasing per column
    levels: np.ndarray = field(init=False)

    def __post_init__(self):
        self.references = np.asarray(self.references, dtype=np.float64)
        self.levels = np.linspace(0.0, 1.0, self.references.shape[0])

    @property
    def n_channels(self):
        return self.references.shape[1]

    def fingerprint(self):
        return hashlib.sha256(np.ascontiguousarray(self.references).tobytes()).hexdigest()

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(f"# quantile-map n_quantiles={self.references.shape[0]} channels={self.n_channels}\n")
            for row in self.references:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")

    @classmethod
    def load(cls, path):
        rows = []
        with open(path) as fh:
            for line in fh:
                if line.startswith("#") or not line.strip():
                    continue
                rows.append([float(v) for v in line.split(",")])
        return cls(np.array(rows))


def quantile_fit(values, n_quantiles=1000):
    """Fit on an ``(n, D)`` array; ``NaN`` entries (unobserved) are ignored."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    cols = [c[np.isfinite(c)] for c in values.T]
    for d, c in enumerate(cols):
        if np.unique(c).size < 2:
            raise DegenerateDataError(f"channel {d} has fewer than 2 distinct training values")
    n_q = min(n_quantiles, min(c.size for c in cols))
    levels = np.linspace(0.0, 1.0, n_q)
    refs = np.stack([np.quantile(c, levels) for c in cols], axis=1)
    # np.quantile can wobble by an ulp; enforce monotone columns
    refs = np.maximum.accumulate(refs, axis=0)
    return QuantileMap(refs)


def _channel_cdf(x, refs, levels):
    # averaging the forward and mirrored interpolation puts tied references at the middle of their level range
    up = np.interp(x, refs, levels)
    down = -np.interp(-x, -refs[::-1], -levels[::-1])
    return 0.5 * (up + down)


def quantile_transform(values, qmap):
    values = np.asarray(values, dtype=np.float64)
    out = np.empty_like(values)
    for d in range(qmap.n_channels):
        cdf = _channel_cdf(values[..., d], qmap.references[:, d], qmap.levels)
        out[..., d] = ndtri(np.clip(cdf, CDF_EPS, 1.0 - CDF_EPS))
    return out


def quantile_inverse(values, qmap):
    values = np.asarray(values, dtype=np.float64)
    out = np.empty_like(values)
    for d in range(qmap.n_channels):
        refs = qmap.references[:, d]
        cdf = ndtr(values[..., d])
        x = np.interp(cdf, qmap.levels, refs)
        # clipped tails map exactly onto the fitted extremes
        x = np.where(cdf <= CDF_EPS * (1 + 1e-6), refs[0], x)
        x = np.where(cdf >= 1.0 - CDF_EPS * (1 + 1e-6), refs[-1], x)
        out[..., d] = x
    return out


# ---------------------------------------------------------------------------
# Masks
# ---------------------------------------------------------------------------

def make_mask(window, missing_rate=0.0, rng=None):
    """Observation mask: NaN entries in ``window`` are missing, plus i.i.d. drops at ``missing_rate``."""
    if not 0.0 <= missing_rate < 1.0:
        raise ParameterError(f"missing_rate must lie in [0, 1), got {missing_rate}")
    window = np.asarray(window, dtype=np.float64)
    M = np.isfinite(window).astype(np.float64)
    if missing_rate > 0:
        M *= rng.random(window.shape) >= missing_rate
    return M


def normalize_windows(windows, qmap, missing_rate=0.0, rng=None):
    """Quantile-normalize raw windows, build masks and zero-fill missing entries."""
    out = []
    for w in windows:
        M = make_mask(w.x0, missing_rate, rng) * w.M
        z = quantile_transform(np.where(np.isfinite(w.x0), w.x0, 0.0), qmap)
        out.append(replace(w, x0=np.where(M > 0, z, 0.0), M=M))
    return out


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray

    def class_counts(self, n_classes):
        return {name: np.bincount([w.y for w in part], minlength=n_classes).tolist()
                for name, part in (("train", self.train), ("val", self.val), ("test", self.test))}


def _holdout_count(n, frac):
    k = int(np.floor(n * frac + 0.5))
    return min(k, max(n - 1, 0))


def stratified_split(windows, test_frac=0.2, val_frac_of_train=0.2, seed=0):
    """Per-class shuffled train/val/test partition; a class too small to share stays in train."""
    rng = np.random.default_rng(seed)
    labels = np.array([w.y for w in windows], dtype=np.int64)
    parts = {"train": [], "val": [], "test": []}
    for cls in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == cls))
        n_test = _holdout_count(len(idx), test_frac)
        test, pool = idx[:n_test], idx[n_test:]
        n_val = _holdout_count(len(pool), val_frac_of_train)
        if n_test == 0 or n_val == 0:
            warnings.warn(f"class {cls} has only {len(idx)} window(s); it is missing from some splits",
                          stacklevel=2)
        parts["test"].append(test)
        parts["val"].append(pool[:n_val])
        parts["train"].append(pool[n_val:])
    idx = {k: np.sort(np.concatenate(v)) if v else np.zeros(0, dtype=np.int64) for k, v in parts.items()}
    return DatasetSplit(train=[windows[i] for i in idx["train"]], val=[windows[i] for i in idx["val"]],
                        test=[windows[i] for i in idx["test"]], train_idx=idx["train"],
                        val_idx=idx["val"], test_idx=idx["test"])


# ---------------------------------------------------------------------------
# Toy data
# ---------------------------------------------------------------------------

def toy_frequency(label, static_class=0):
    """Cycles per window for a toy class; ``0`` marks the static class."""
    if label == static_class:
        return 0
    rank = label if label < static_class else label - 1
    return 2 ** (rank + 1)


def toy_dataset(n_per_class, T_seq=100, D=3, n_classes=3, rng=None, noise=0.1, static_class=0):
    """Class-conditional sinusoids with per-channel random phase plus Gaussian noise.

    The static class is noise only. ``n_per_class`` may be an int or a
    per-class sequence of counts. Values are in "raw" units.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    counts = [n_per_class] * n_classes if np.isscalar(n_per_class) else list(n_per_class)
    t = np.arange(T_seq)
    windows = []
    for label, n in enumerate(counts):
        f = toy_frequency(label, static_class)
        for _ in range(int(n)):
            phase = rng.uniform(0, 2 * np.pi, D)
            signal = np.sin(2 * np.pi * f * t[:, None] / T_seq + phase) if f else np.zeros((T_seq, D))
            windows.append(SequenceWindow(signal + rng.normal(0.0, noise, (T_seq, D)), label))
    return windows


# ---------------------------------------------------------------------------
# Cache files
# ---------------------------------------------------------------------------

def write_windows_csv(path, windows, seq_ids=None, with_mask=True):
    if not windows:
        raise ParameterError("no windows to write")
    D = windows[0].x0.shape[1]
    seq_ids = range(len(windows)) if seq_ids is None else seq_ids
    header = ["seq_id", "t"] + [f"channel_{d}" for d in range(D)] + ["label"]
    if with_mask:
        header += [f"mask_{d}" for d in range(D)]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for sid, w in zip(seq_ids, windows):
            for t in range(w.x0.shape[0]):
                row = [sid, t] + [repr(float(v)) for v in w.x0[t]] + [w.y]
                if with_mask:
                    row += [int(m) for m in w.M[t]]
                wr.writerow(row)


def read_windows_csv(path):
    """Inverse of :func:`write_windows_csv`; returns ``(seq_ids, windows)`` in file order."""
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    with fh:
        rd = csv.reader(fh)
        try:
            header = next(rd)
        except StopIteration:
            raise DataFormatError(f"{path} is empty") from None
        if header[:2] != ["seq_id", "t"] or "label" not in header:
            raise DataFormatError(f"{path}: unexpected header {header}")
        chan = [i for i, h in enumerate(header) if h.startswith("channel_")]
        mask = [i for i, h in enumerate(header) if h.startswith("mask_")]
        li = header.index("label")
        seqs = {}
        order = []
        try:
            for row in rd:
                sid = int(row[0])
                if sid not in seqs:
                    seqs[sid] = ([], [], int(row[li]))
                    order.append(sid)
                seqs[sid][0].append([float(row[i]) for i in chan])
                seqs[sid][1].append([float(row[i]) for i in mask] if mask else [1.0] * len(chan))
        except (ValueError, IndexError) as exc:
            raise DataFormatError(f"{path}: malformed row ({exc})") from exc
    windows = [SequenceWindow(np.array(seqs[s][0]), seqs[s][2], np.array(seqs[s][1])) for s in order]
    return order, windows

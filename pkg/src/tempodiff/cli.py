"""Command-line pipeline: ingest, train, sample, balance, evaluate, report.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import FORMAT_VERSION, CheckpointError, load_checkpoint, save_checkpoint
from .config import SCHEMA_VERSION, ConfigError, load_config
from .data import (ACTIVITIES, DataFormatError, DegenerateDataError, QuantileMap, SequenceWindow,
                   normalize_windows, parse_raw, quantile_fit, quantile_inverse, quantile_transform,
                   read_windows_csv, segment_windows, stratified_split, toy_dataset, write_windows_csv)
from .diffusion import NumericalError, cosine_beta_schedule, sample_loop
from .forest import feature_matrix, rf_train
from .metrics import EvalReport, classification_report, temporal_report
from .model import Denoiser, DenoiserConfig
from .nn import DimensionError, LRSchedule, ParameterError
from .smote import InsufficientDataError, balance_with_synthetic, smote_generator
from .training import TrainArrays, TrainState, fit, new_train_state

log = logging.getLogger("tempodiff")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# streams split off the global seed so each stage draws independent numbers
STREAM_DATA, STREAM_MASK, STREAM_INIT, STREAM_SAMPLE, STREAM_SMOTE = range(5)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def version_string():
    return f"tempodiff {__version__} (config schema {SCHEMA_VERSION}, checkpoint format {FORMAT_VERSION})"


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def stream(seed, tag):
    return np.random.default_rng([seed, tag])


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def provenance(cfg, inputs):
    """Block embedded in every output: resolved config, seed and input content hashes."""
    return {"tool_version": __version__, "schema_version": SCHEMA_VERSION, "seed": cfg.seed,
            "config": cfg.to_dict(), "inputs": inputs}


# ---------------------------------------------------------------------------
# Dataset cache
# ---------------------------------------------------------------------------

class Dataset:
    """A cache directory written by ``ingest`` or ``balance``."""

    def __init__(self, directory):
        self.dir = Path(directory)
        manifest = self.dir / "manifest.json"
        if not manifest.is_file():
            raise DataFormatError(f"{self.dir} is not a dataset cache (no manifest.json)")
        with open(manifest) as fh:
            self.manifest = json.load(fh)
        _, self.windows = read_windows_csv(self.dir / "windows.csv")
        _, self.raw = read_windows_csv(self.dir / "raw_windows.csv")
        self.qmap = QuantileMap.load(self.dir / "quantile_map.txt")
        if self.qmap.fingerprint() != self.manifest["quantile_map_sha256"]:
            raise DataFormatError(f"{self.dir}: quantile map does not match its manifest")
        if len(self.windows) != len(self.raw):
            raise DataFormatError(f"{self.dir}: windows.csv and raw_windows.csv disagree in length")
        self.splits = {k: np.asarray(v, dtype=np.int64) for k, v in self.manifest["splits"].items()}

    @property
    def class_names(self):
        return list(self.manifest["class_names"])

    @property
    def n_classes(self):
        return len(self.class_names)

    def part(self, name, raw=False):
        src = self.raw if raw else self.windows
        return [src[i] for i in self.splits[name]]

    def hashes(self):
        return {f: file_sha256(self.dir / f) for f in ("windows.csv", "raw_windows.csv", "quantile_map.txt")}


def write_dataset(out, raw, normalized, qmap, splits, class_names, extra):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_windows_csv(out / "windows.csv", normalized)
    write_windows_csv(out / "raw_windows.csv", raw)
    qmap.save(out / "quantile_map.txt")
    manifest = dict(extra)
    manifest.update({
        "kind": "dataset",
        "class_names": list(class_names),
        "n_windows": len(raw),
        "T_seq": int(raw[0].x0.shape[0]),
        "D": int(raw[0].x0.shape[1]),
        "splits": {k: [int(i) for i in v] for k, v in splits.items()},
        "class_counts": {k: np.bincount([raw[i].y for i in v], minlength=len(class_names)).tolist()
                         for k, v in splits.items()},
        "quantile_map_sha256": qmap.fingerprint(),
        "files": {f: file_sha256(out / f) for f in ("windows.csv", "raw_windows.csv", "quantile_map.txt")},
    })
    write_json(out / "manifest.json", manifest)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def parse_counts(text, n_classes):
    """``"N"`` gives N windows for each of ``n_classes``; ``"a,b,c"`` lists per-class counts."""
    try:
        counts = [int(c) for c in text.split(",")]
    except ValueError:
        raise UsageError(f"--toy expects N or N0,N1,...; got {text!r}") from None
    if len(counts) == 1:
        counts = counts * n_classes
    if len(counts) < 2 or min(counts) < 1:
        raise UsageError("--toy needs at least two classes with a positive window count each")
    return counts


def cmd_ingest(args, cfg):
    if args.toy is not None:
        counts = parse_counts(args.toy, cfg.toy_classes)
        windows = toy_dataset(counts, T_seq=cfg.T_seq, D=cfg.toy_channels, n_classes=len(counts),
                              rng=stream(cfg.seed, STREAM_DATA), noise=cfg.toy_noise)
        class_names = [f"toy_{k}" for k in range(len(counts))]
        source = {"type": "toy", "n_per_class": counts}
        inputs = {}
    else:
        raw_path = Path(args.raw)
        if not raw_path.is_file():
            raise UsageError(f"raw file {raw_path} does not exist (use --toy N for the built-in data)")
        users = [int(u) for u in args.users.split(",") if u.strip()] if args.users else cfg.user_list()
        records, skipped = parse_raw(raw_path, users=users)
        windows = segment_windows(records, T_seq=cfg.T_seq, overlap=cfg.overlap, gap_factor=cfg.gap_factor)
        if not windows:
            raise DataFormatError(f"{raw_path}: no complete windows of length {cfg.T_seq}")
        class_names = list(ACTIVITIES)
        source = {"type": "raw", "file": raw_path.name, "records": len(records), "skipped_lines": skipped,
                  "users": users}
        inputs = {raw_path.name: file_sha256(raw_path)}
        log.info("parsed %d records (%d malformed lines skipped), %d windows", len(records), skipped, len(windows))

    split = stratified_split(windows, test_frac=cfg.test_frac, val_frac_of_train=cfg.val_frac, seed=cfg.seed)
    train_vals = np.concatenate([w.x0 for w in split.train])
    qmap = quantile_fit(train_vals, n_quantiles=cfg.n_quantiles)
    normalized = normalize_windows(windows, qmap, cfg.missing_rate, stream(cfg.seed, STREAM_MASK))
    splits = {"train": split.train_idx, "val": split.val_idx, "test": split.test_idx}
    extra = provenance(cfg, inputs)
    extra["source"] = source
    write_dataset(args.out, windows, normalized, qmap, splits, class_names, extra)
    print(f"ingested {len(windows)} windows into {args.out} "
          f"(train {len(split.train)}, val {len(split.val)}, test {len(split.test)})")
    return EXIT_OK


def model_config_from(cfg, ds):
    return DenoiserConfig(D=ds.manifest["D"], T_seq=ds.manifest["T_seq"], T_diffusion=cfg.T_diffusion,
                          d_t=cfg.d_t, d_c=cfg.d_c, n_classes=ds.n_classes, d_hidden=cfg.d_hidden,
                          dropout_rate=cfg.dropout_rate, adapters_enabled=cfg.adapters_enabled,
                          n_adapters=cfg.n_adapters, dropout_placement=cfg.dropout_placement)


def schedule_from(meta):
    s = meta["schedule"]
    return cosine_beta_schedule(s["T"], s["s"], s["beta_clip"])


def cmd_train(args, cfg):
    if args.adapters is not None:
        cfg = cfg.replace(adapters_enabled=args.adapters == "on")
    ds = Dataset(args.data)
    train = TrainArrays.from_windows(ds.part("train"))
    val = TrainArrays.from_windows(ds.part("val"))
    if len(train) == 0:
        raise DataFormatError(f"{args.data}: empty training split")
    steps_per_epoch = -(-len(train) // cfg.batch_size)
    total_steps = cfg.max_steps or cfg.epochs * steps_per_epoch

    if args.resume:
        params, optimizer, meta = load_checkpoint(args.resume)
        if meta.get("dataset_sha256") != ds.hashes():
            raise DataFormatError(f"{args.resume} was trained on a different dataset")
        mcfg = DenoiserConfig(**meta["model_config"])
        model = Denoiser(mcfg, params=params)
        model.trained = meta.get("trained", False)
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng_state"]
        sched = LRSchedule(base_lr=cfg.lr, total_steps=max(total_steps, 1), warmup_steps=cfg.warmup_steps)
        state = TrainState(optimizer=optimizer, lr_schedule=sched, rng=rng, epoch=meta["epoch"],
                           history=[tuple(r) for r in meta["history"]])
        schedule = schedule_from(meta)
        log.info("resuming at epoch %d, step %d", state.epoch, optimizer.step)
    else:
        mcfg = model_config_from(cfg, ds)
        model = Denoiser(mcfg, rng=stream(cfg.seed, STREAM_INIT))
        state = new_train_state(model, total_steps, seed=cfg.seed, lr=cfg.lr, weight_decay=cfg.weight_decay,
                                warmup_steps=cfg.warmup_steps)
        schedule = cosine_beta_schedule(cfg.T_diffusion, cfg.schedule_s, cfg.beta_clip)

    history = fit(model, train, val, schedule, state, epochs=cfg.epochs, batch_size=cfg.batch_size,
                  clip_norm=cfg.clip_norm, patience=cfg.patience, min_delta=cfg.min_delta,
                  mask_loss=cfg.mask_loss, max_steps=cfg.max_steps or None)

    out = Path(args.out)
    inputs = ds.hashes()
    if args.resume:
        inputs["resume_checkpoint"] = file_sha256(args.resume)
    meta = provenance(cfg, inputs)
    meta.update({
        "model_config": mcfg.to_dict(),
        "schedule": {"T": schedule.T, "s": cfg.schedule_s, "beta_clip": cfg.beta_clip},
        "dataset_sha256": ds.hashes(),
        "class_names": ds.class_names,
        "train_class_counts": np.bincount(train.y, minlength=ds.n_classes).tolist(),
        "quantile_map": ds.qmap.references.tolist(),
        "quantile_map_sha256": ds.qmap.fingerprint(),
        "epoch": state.epoch,
        "step": state.optimizer.step,
        "history": [list(r) for r in history],
        "rng_state": state.rng.bit_generator.state,
        "trained": bool(model.trained),
    })
    save_checkpoint(out, model.params, state.optimizer, meta)
    curve = Path(args.curve) if args.curve else out.with_name(out.name + ".loss.csv")
    with open(curve, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, tr, va in history:
            wr.writerow([epoch, repr(float(tr)), repr(float(va))])
    manifest = {k: v for k, v in meta.items() if k not in ("quantile_map", "rng_state")}
    manifest["kind"] = "model"
    manifest["checkpoint_format"] = FORMAT_VERSION
    manifest["checkpoint_sha256"] = file_sha256(out)
    write_json(out.with_name(out.name + ".json"), manifest)
    print(f"trained {state.epoch} epochs ({state.optimizer.step} steps); "
          f"final train loss {history[-1][1]:.5f}; wrote {out}")
    return EXIT_OK


def load_model(path):
    params, _, meta = load_checkpoint(path)
    model = Denoiser(DenoiserConfig(**meta["model_config"]), params=params)
    model.trained = meta.get("trained", False)
    qmap = QuantileMap(np.array(meta["quantile_map"]))
    if qmap.fingerprint() != meta["quantile_map_sha256"]:
        raise CheckpointError(f"{path}: embedded quantile map does not match its fingerprint")
    return model, qmap, meta


def generate(model, qmap, meta, labels, rng, batch_size):
    """Sample one sequence per label and map it back to original units."""
    cfg = model.config
    labels = np.asarray(labels, dtype=np.int64)
    z = sample_loop(model, schedule_from(meta), len(labels), labels, np.ones((cfg.T_seq, cfg.D)), rng,
                    batch_size=batch_size)
    x = quantile_inverse(z, qmap)
    return [SequenceWindow(x[i], int(labels[i])) for i in range(len(labels))]


def cmd_sample(args, cfg):
    model, qmap, meta = load_model(args.ckpt)
    n_classes = model.config.n_classes
    if args.per_class is not None:
        if args.per_class < 1:
            raise UsageError("--per-class must be positive")
        counts = [args.per_class] * n_classes
    else:
        counts = meta["train_class_counts"]
    labels = np.repeat(np.arange(n_classes), counts)
    windows = generate(model, qmap, meta, labels, stream(cfg.seed, STREAM_SAMPLE), cfg.sample_batch)
    out = Path(args.out)
    write_windows_csv(out, windows, with_mask=False)
    side = provenance(cfg, {"checkpoint": file_sha256(args.ckpt)})
    side.update({"kind": "samples", "class_names": meta["class_names"], "class_counts": list(map(int, counts)),
                 "quantile_map_sha256": qmap.fingerprint(), "output_sha256": file_sha256(out)})
    write_json(out.with_name(out.name + ".json"), side)
    print(f"sampled {len(windows)} sequences into {out}")
    return EXIT_OK


def cmd_balance(args, cfg):
    ds = Dataset(args.data)
    train_raw = ds.part("train", raw=True)
    inputs = ds.hashes()
    if args.method == "smote":
        gen = smote_generator(train_raw, k=cfg.smote_k, rng=stream(cfg.seed, STREAM_SMOTE))
    else:
        if not args.ckpt:
            raise UsageError("--method tempodiff needs --ckpt")
        model, qmap, meta = load_model(args.ckpt)
        if qmap.fingerprint() != ds.qmap.fingerprint():
            raise DataFormatError(f"{args.ckpt} was trained with a different quantile map than {args.data}")
        rng = stream(cfg.seed, STREAM_SAMPLE)
        inputs["checkpoint"] = file_sha256(args.ckpt)

        def gen(label, n):
            return generate(model, qmap, meta, [label] * n, rng, cfg.sample_batch)

    augmented, additions = balance_with_synthetic(train_raw, gen, ds.n_classes)
    new = augmented[len(train_raw):]
    new_norm = [SequenceWindow(quantile_transform(w.x0, ds.qmap), w.y) for w in new]
    start = len(ds.raw)
    splits = dict(ds.splits)
    splits["train"] = np.concatenate([ds.splits["train"], np.arange(start, start + len(new))])
    extra = provenance(cfg, inputs)
    extra["source"] = ds.manifest.get("source", {})
    extra["augmentation"] = {"method": args.method, "additions": additions.tolist(),
                             "base_dataset": ds.manifest["files"]}
    write_dataset(args.out, ds.raw + new, ds.windows + new_norm, ds.qmap, splits, ds.class_names, extra)
    print(f"balanced with {args.method}: added {additions.tolist()} windows per class; wrote {args.out}")
    return EXIT_OK


def cmd_evaluate(args, cfg):
    ds = Dataset(args.data)
    train, test = ds.part("train", raw=True), ds.part("test", raw=True)
    if not train or not test:
        raise DataFormatError(f"{args.data}: train and test splits must be non-empty")
    forest = rf_train(feature_matrix(train), [w.y for w in train], n_classes=ds.n_classes, n_trees=cfg.n_trees,
                      max_depth=cfg.max_depth or None, min_samples_leaf=cfg.min_samples_leaf, seed=cfg.seed)
    y_test = np.array([w.y for w in test])
    cm = classification_report(y_test, forest.predict(feature_matrix(test)), n_classes=ds.n_classes)

    inputs = ds.hashes()
    real = np.stack([w.x0 for w in test])
    if args.synth:
        _, synth_w = read_windows_csv(args.synth)
        if synth_w[0].x0.shape != real.shape[1:]:
            raise DataFormatError(f"{args.synth}: window shape {synth_w[0].x0.shape} != {real.shape[1:]}")
        synth = np.stack([w.x0 for w in synth_w])
        report = temporal_report(real, y_test, synth, np.array([w.y for w in synth_w]), ds.class_names,
                                 n_bins=cfg.n_bins, max_lag=cfg.max_lag, seed=cfg.seed)
        inputs["synth"] = file_sha256(args.synth)
    else:
        report = EvalReport(per_class={}, shuffle_baseline={}, wasserstein1_pooled={})
    method = args.name or ds.manifest.get("augmentation", {}).get("method", "real")
    report.config = provenance(cfg, inputs)
    report.config["method"] = method
    report.confusion_matrix = cm
    report.class_names = tuple(ds.class_names)
    out = Path(args.out)
    report.save(out)
    if args.synth:
        report.write_plot_csvs(Path(args.plots) if args.plots else out.parent, prefix=f"{out.stem}_")
    s = report.summary()
    print(f"{method}: accuracy {s['accuracy']:.4f}  macro-F1 {s['macro_f1']:.4f}; wrote {out}")
    return EXIT_OK


REPORT_COLUMNS = ("accuracy", "macro_f1", "bigram_dist", "acf_dist", "W1")


def comparison_rows(paths):
    rows = []
    for p in paths:
        rep = EvalReport.load(p)
        name = (rep.config or {}).get("method") or Path(p).stem
        rows.append([name] + [rep.summary().get(c) for c in REPORT_COLUMNS])
    return rows


def format_table(rows):
    header = ["method", *REPORT_COLUMNS]
    cells = [header] + [[r[0]] + ["-" if v is None else f"{v:.4f}" for v in r[1:]] for r in rows]
    widths = [max(len(c[i]) for c in cells) for i in range(len(header))]
    lines = ["  ".join(c[i].ljust(widths[i]) if i == 0 else c[i].rjust(widths[i]) for i in range(len(c)))
             for c in cells]
    return "\n".join(lines) + "\n"


def cmd_report(args, cfg):
    rows = comparison_rows(args.reports)
    out = Path(args.out)
    with open(out, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["method", *REPORT_COLUMNS])
        for r in rows:
            wr.writerow([r[0]] + ["" if v is None else repr(float(v)) for v in r[1:]])
    text = format_table(rows)
    out.with_suffix(".txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="global seed (overrides config)")
    common.add_argument("--config", default=argparse.SUPPRESS, help="key = value config file")
    common.add_argument("--set", action="append", default=argparse.SUPPRESS, metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = _Parser(prog="tempodiff", description="Temporal tabular diffusion for sensor windows.",
                     parents=[common])
    parser.add_argument("--version", action="version", version=version_string())
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="build a dataset cache from raw data or toy data")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--raw", help="WISDM-style raw text file")
    src.add_argument("--toy", metavar="N[,N...]",
                     help="generate the built-in toy dataset: windows per class, or one count per class")
    p.add_argument("--users", help="comma separated user ids to keep")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", parents=[common], help="train the denoiser")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--adapters", choices=("on", "off"))
    p.add_argument("--curve", help="loss-curve CSV (default: <out>.loss.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", parents=[common], help="draw class-conditioned sequences")
    p.add_argument("--ckpt", required=True)
    n = p.add_mutually_exclusive_group(required=True)
    n.add_argument("--per-class", type=int)
    n.add_argument("--match-train-dist", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("balance", parents=[common], help="top up minority classes in the training split")
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=("tempodiff", "smote"), required=True)
    p.add_argument("--ckpt")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_balance)

    p = sub.add_parser("evaluate", parents=[common], help="classifier and temporal fidelity report")
    p.add_argument("--data", required=True)
    p.add_argument("--synth", help="synthetic sequences CSV from `sample`")
    p.add_argument("--out", required=True)
    p.add_argument("--plots", help="directory for plot CSVs (default: next to the report)")
    p.add_argument("--name", help="method name recorded in the report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", parents=[common], help="side-by-side table of evaluation reports")
    p.add_argument("--reports", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return exc.code or 0
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        overrides = list(getattr(args, "set", []))
        if hasattr(args, "seed"):
            overrides.append(("seed", str(args.seed)))
        cfg = load_config(getattr(args, "config", None), overrides)
        return args.func(args, cfg)
    except (UsageError, ConfigError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataFormatError, DegenerateDataError, CheckpointError, InsufficientDataError, DimensionError,
            OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

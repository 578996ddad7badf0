"""Experiment command line: train, eval, compare, gradcheck.

One INI-style config file fully determines a run; every field has a default
except the dataset source. Exit codes: 0 success, 2 configuration or input
error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    ConsistencyError,
    DatasetSplit,
    DegenerateDataError,
    IdxFormatError,
    NormalizationStats,
    load_idx,
    normalize,
    synth_dataset,
)
from .models import (
    CheckpointFormatError,
    ColumnSpec,
    ConfigurationError,
    MultiPathModel,
    build_m1,
    build_m2,
    build_m3,
    build_m4,
    default_regions,
    load_checkpoint,
    quad_tree_regions,
    save_checkpoint,
)
from .routing import TargetBatch
from .stats import compare_runs
from .training import NumericsError, TrainConfig, evaluate, gradient_check, predict, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class ConfigError(ValueError):
    """A config file field is missing or unparseable; names the field."""

    def __init__(self, fieldname: str, message: str):
        self.fieldname = fieldname
        super().__init__(f"{fieldname}: {message}")


@dataclass
class ExperimentConfig:
    """Resolved contents of one run's config file."""

    topology: str = "m1"
    columns: int = 3
    kind: str = "mlp"
    hidden: tuple = (32, 32)
    channels: tuple = (8, 16)
    regions: str = "default"  # default | quad23 | "t,l,h,w;t,l,h,w;..."
    model_seed: int = 0

    source: str = ""  # synth | idx (no default: must be configured)
    classes: int = 5
    per_class: int = 200
    test_per_class: int = 50
    data_channels: int = 1
    height: int = 8
    width: int = 8
    noise: float = 0.25
    jitter: float = 0.0
    data_seed: int = 0
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    class_count: int = 0  # 0 = infer from labels
    train_limit: int = 0  # 0 = use everything

    training: TrainConfig = field(default_factory=TrainConfig)

    out_dir: str = "run"
    protocols: tuple = ("strong", "mean", "per_pathway")


def _section(parser: configparser.ConfigParser, name: str) -> configparser.SectionProxy:
    if not parser.has_section(name):
        parser.add_section(name)
    return parser[name]


def _get(section, key, cast, default):
    raw = section.get(key)
    if raw is None or raw == "":
        return default
    try:
        if cast is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"{section.name}.{key}", str(exc)) from None


def _int_tuple(raw: str) -> tuple:
    return tuple(int(part) for part in raw.replace(" ", "").split(",") if part)


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("config", f"no such file: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError("config", f"unparseable: {exc}") from None

    model = _section(parser, "model")
    data = _section(parser, "data")
    tr = _section(parser, "train")
    out = _section(parser, "output")

    cfg = ExperimentConfig(
        topology=_get(model, "topology", str, "m1").lower(),
        columns=_get(model, "columns", int, 3),
        kind=_get(model, "kind", str, "mlp"),
        hidden=_get(model, "hidden", _int_tuple, (32, 32)),
        channels=_get(model, "channels", _int_tuple, (8, 16)),
        regions=_get(model, "regions", str, "default"),
        model_seed=_get(model, "seed", int, 0),
        source=_get(data, "source", str, "").lower(),
        classes=_get(data, "classes", int, 5),
        per_class=_get(data, "per_class", int, 200),
        test_per_class=_get(data, "test_per_class", int, 50),
        data_channels=_get(data, "channels", int, 1),
        height=_get(data, "height", int, 8),
        width=_get(data, "width", int, 8),
        noise=_get(data, "noise", float, 0.25),
        jitter=_get(data, "jitter", float, 0.0),
        data_seed=_get(data, "seed", int, 0),
        train_images=_get(data, "train_images", str, ""),
        train_labels=_get(data, "train_labels", str, ""),
        test_images=_get(data, "test_images", str, ""),
        test_labels=_get(data, "test_labels", str, ""),
        class_count=_get(data, "class_count", int, 0),
        train_limit=_get(data, "train_limit", int, 0),
        out_dir=_get(out, "dir", str, "run"),
        protocols=tuple(
            p.strip() for p in _get(out, "protocols", str, "strong,mean,per_pathway").split(",") if p.strip()
        ),
    )
    try:
        cfg.training = TrainConfig(
            epochs=_get(tr, "epochs", int, 20),
            batch_size=_get(tr, "batch_size", int, 64),
            learning_rate=_get(tr, "learning_rate", float, 1e-3),
            optimizer=_get(tr, "optimizer", str, "adam"),
            momentum=_get(tr, "momentum", float, 0.9),
            loss_mode=_get(tr, "loss_mode", str, "weakroute"),
            loss_renormalize=_get(tr, "loss_renormalize", bool, True),
            seed=_get(tr, "seed", int, 0),
        )
    except ValueError as exc:
        raise ConfigError("train", str(exc)) from None

    if cfg.source not in ("synth", "idx"):
        raise ConfigError("data.source", f"must be 'synth' or 'idx', got {cfg.source!r}")
    if cfg.source == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if not getattr(cfg, key):
                raise ConfigError(f"data.{key}", "required when data.source = idx")
    if cfg.topology not in ("m1", "m2", "m3", "m4"):
        raise ConfigError("model.topology", f"must be one of m1..m4, got {cfg.topology!r}")
    for p in cfg.protocols:
        if p not in ("strong", "mean", "per_pathway"):
            raise ConfigError("output.protocols", f"unknown protocol {p!r}")
    return cfg


def load_datasets(cfg: ExperimentConfig) -> tuple[DatasetSplit, DatasetSplit]:
    geometry = (cfg.data_channels, cfg.height, cfg.width)
    if cfg.source == "synth":
        train_split = synth_dataset(
            cfg.classes, cfg.per_class, geometry, cfg.data_seed, cfg.noise, cfg.jitter
        )
        test_split = synth_dataset(
            cfg.classes, cfg.test_per_class, geometry, cfg.data_seed + 1, cfg.noise, cfg.jitter
        )
    else:
        count = cfg.class_count if cfg.class_count > 0 else None
        train_split = load_idx(cfg.train_images, cfg.train_labels, count)
        test_split = load_idx(cfg.test_images, cfg.test_labels, count or train_split.class_count)
    if cfg.train_limit > 0:
        train_split = train_split.subset(cfg.train_limit)
    return train_split, test_split


def build_model(cfg: ExperimentConfig, train_split: DatasetSplit) -> MultiPathModel:
    _, channels, height, width = train_split.images.shape
    spec = ColumnSpec(
        n_classes=train_split.class_count,
        in_channels=channels,
        height=height,
        width=width,
        kind=cfg.kind,
        hidden=cfg.hidden,
        channels=cfg.channels,
    )
    if cfg.topology == "m1":
        return build_m1(cfg.columns, spec, cfg.model_seed)
    if cfg.topology == "m2":
        return build_m2(spec, cfg.model_seed)
    if cfg.topology == "m3":
        return build_m3(spec, cfg.model_seed)
    if cfg.regions == "default":
        regions = default_regions(height, width)
    elif cfg.regions == "quad23":
        regions = quad_tree_regions(height, width)
    else:
        regions = [tuple(int(v) for v in part.split(",")) for part in cfg.regions.split(";") if part]
    return build_m4(regions, spec, cfg.model_seed)


def _helper_threads() -> int:
    raw = os.environ.get("WEAKROUTE_THREADS", "0")
    try:
        return max(0, int(raw))
    except ValueError:
        return 0


def write_manifest(out_dir: Path, cfg: ExperimentConfig) -> None:
    snapshot = asdict(cfg)
    snapshot["training"] = asdict(cfg.training)
    manifest = {
        "config": snapshot,
        "code_version": __version__,
        "seed": cfg.training.seed,
        "created_utc": datetime.now(timezone.utc).isoformat(),
        "outputs": ["manifest.json", "metrics.csv", "best.ckpt", "predictions.json"],
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=list)


class MetricsWriter:
    """Appends one CSV row per finished epoch, flushed for live monitoring."""

    def __init__(self, path, n_pathways: int):
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(
            ["epoch", "loss", "train_acc", "test_strong", "test_mean"]
            + [f"pathway_{j}" for j in range(n_pathways)]
        )
        self._fh.flush()

    def __call__(self, m) -> None:
        self._writer.writerow(
            [m.epoch]
            + [f"{v:.12g}" for v in (m.mean_loss, m.train_accuracy, m.test_strong, m.test_mean)]
            + [f"{v:.12g}" for v in m.per_pathway]
        )
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def cmd_train(args) -> int:
    try:
        cfg = parse_config(args.config)
        train_split, test_split = load_datasets(cfg)
        train_split, stats = normalize(train_split)
        test_split, _ = normalize(test_split, stats)
        model = build_model(cfg, train_split)
    except (ConfigError, ConfigurationError, ConsistencyError, DegenerateDataError,
            IdxFormatError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(out_dir, cfg)

    writer = MetricsWriter(out_dir / "metrics.csv", model.n_pathways)
    try:
        best_state, metrics = train(model, train_split, test_split, cfg.training,
                                    prefetch=_helper_threads(), on_epoch=writer)
    except NumericsError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        writer.close()

    model.load_state(best_state)
    save_checkpoint(
        out_dir / "best.ckpt",
        model,
        extra={"normalization": {"mean": stats.mean.tolist(), "std": stats.std.tolist()}},
    )
    predictions = {
        "truth": test_split.labels.tolist(),
        "data_digest": _split_digest(test_split),
        "protocols": {
            p: predict(model, test_split, p).tolist()
            for p in cfg.protocols
            if p != "per_pathway"
        },
    }
    with open(out_dir / "predictions.json", "w") as fh:
        json.dump(predictions, fh)

    final = metrics[-1]
    print(
        f"trained {cfg.topology} for {cfg.training.epochs} epochs: "
        f"train_acc={final.train_accuracy:.4f} test_strong={final.test_strong:.4f} "
        f"test_mean={final.test_mean:.4f} -> {out_dir}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        model, extra = load_checkpoint(args.checkpoint)
    except (CheckpointFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = parse_config(args.dataset)
        train_split, test_split = load_datasets(cfg)
        split = test_split if args.split == "test" else train_split
        norm = extra.get("normalization") if isinstance(extra, dict) else None
        if norm:
            stats = NormalizationStats(np.asarray(norm["mean"]), np.asarray(norm["std"]))
            split, _ = normalize(split, stats)
        if split.images.shape[1:] != model.geometry:
            raise ConsistencyError(
                f"dataset geometry {split.images.shape[1:]} does not match "
                f"checkpoint geometry {model.geometry}"
            )
        if split.class_count != model.n_classes:
            raise ConsistencyError(
                f"dataset has {split.class_count} classes, checkpoint expects {model.n_classes}"
            )
    except (ConfigError, ConfigurationError, ConsistencyError, DegenerateDataError,
            IdxFormatError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    accuracy = evaluate(model, split, args.protocol)
    result = {
        "protocol": args.protocol,
        "accuracy": accuracy.tolist() if isinstance(accuracy, np.ndarray) else float(accuracy),
        "n": len(split),
    }
    print(json.dumps(result))
    return EXIT_OK


def _split_digest(split: DatasetSplit) -> str:
    import hashlib

    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(split.images).tobytes())
    digest.update(np.ascontiguousarray(split.labels).tobytes())
    return digest.hexdigest()


def _load_predictions(run_dir: Path) -> dict:
    for required in ("metrics.csv", "predictions.json"):
        if not (run_dir / required).is_file():
            raise ConsistencyError(f"{run_dir} is missing {required}")
    with open(run_dir / "predictions.json") as fh:
        return json.load(fh)


def _delta_plot(path, report) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    protocols = [entry["protocol"] for entry in report]
    deltas = [100.0 * entry["delta"] for entry in report]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    bars = ax.bar(protocols, deltas, color=["#4c72b0" if d >= 0 else "#c44e52" for d in deltas])
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_ylabel("accuracy delta (B - A), percentage points")
    ax.set_title("Run B vs run A by inference protocol")
    ax.bar_label(bars, fmt="%.2f")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_compare(args) -> int:
    dir_a, dir_b = Path(args.run_a), Path(args.run_b)
    try:
        preds_a = _load_predictions(dir_a)
        preds_b = _load_predictions(dir_b)
        if preds_a["truth"] != preds_b["truth"] or preds_a.get("data_digest") != preds_b.get(
            "data_digest"
        ):
            raise ConsistencyError("runs were evaluated on different test sets")
        report = compare_runs(preds_a["protocols"], preds_b["protocols"], preds_a["truth"])
    except (ConsistencyError, KeyError, json.JSONDecodeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out_json = dir_b / "comparison.json"
    with open(out_json, "w") as fh:
        json.dump(report, fh, indent=2)
    out_png = dir_b / "compare.png"
    _delta_plot(out_png, report)
    print(json.dumps(report))
    print(f"wrote {out_json} and {out_png}", file=sys.stderr)
    return EXIT_OK


def gradcheck_case(topology: str, seed: int, margin: float = 3e-4, grad_floor: float = 1e-5):
    """Tiny model plus a small random batch for finite-difference sweeps.

    A central difference with step 1e-6 is only meaningful when the forward
    pass stays on one smooth piece (no relu gate, pooling tie or selection
    within ``margin`` of flipping) and when every nonzero gradient coordinate
    is large enough to resolve against float64 roundoff (``grad_floor``).
    Candidate batches are drawn deterministically until both hold.
    """
    from .routing import weakroute_loss
    from .tensor import Tape, Tensor, record_kink_margins

    n_classes, height, width = 3, 8, 8
    spec_mlp = ColumnSpec(n_classes, 1, height, width, kind="mlp", hidden=(6, 6))
    spec_cnn = ColumnSpec(n_classes, 1, height, width, kind="cnn", channels=(3, 4))
    if topology == "m1":
        model = build_m1(2, spec_mlp, seed)
    elif topology == "m2":
        model = build_m2(spec_cnn, seed)
    elif topology == "m3":
        model = build_m3(spec_cnn, seed)
    elif topology == "m4":
        model = build_m4(default_regions(height, width), spec_cnn, seed)
    else:
        raise ConfigurationError(f"unknown topology {topology!r}")
    for attempt in range(256):
        rng = np.random.default_rng((int(seed), 99, attempt))
        images = rng.normal(0.0, 1.0, (2, 1, height, width))
        target = TargetBatch.from_labels(rng.integers(0, n_classes, 2), n_classes)
        model.zero_grads()
        with record_kink_margins() as margins, Tape() as tape:
            loss = weakroute_loss(model.forward(Tensor(images)), target)
        tape.backward(loss)
        if margins and min(margins) <= margin:
            continue
        coords = np.concatenate(
            [np.abs(t.grad).ravel() for _, t in model.parameters if t.grad is not None]
        )
        nonzero = coords[coords > 0]
        model.zero_grads()
        if nonzero.size and nonzero.min() < grad_floor:
            continue
        return model, images, target
    raise RuntimeError(f"found no finite-difference-safe batch for {topology} seed {seed}")


def cmd_gradcheck(args) -> int:
    try:
        model, images, target = gradcheck_case(args.topology, args.seed)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    worst_name, report = gradient_check(model, images, target)
    print(
        json.dumps(
            {
                "topology": args.topology,
                "seed": args.seed,
                "max_rel_error": report.max_rel_error,
                "worst_parameter": worst_name,
                "worst_index": report.worst_index,
                "analytic": report.analytic,
                "numeric": report.numeric,
            }
        )
    )
    return EXIT_OK if report.max_rel_error < 1e-4 else EXIT_NUMERIC


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="weakroute",
        description="Train and evaluate multi-pathway classifiers with weakness-routed gradients.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training experiment from a config file")
    p_train.add_argument("config", help="INI config file")
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("dataset", help="config file providing the [data] section")
    p_eval.add_argument("--protocol", choices=("strong", "mean", "per_pathway"), default="mean")
    p_eval.add_argument("--split", choices=("train", "test"), default="test")
    p_eval.set_defaults(fn=cmd_eval)

    p_cmp = sub.add_parser("compare", help="compare two finished runs")
    p_cmp.add_argument("run_a")
    p_cmp.add_argument("run_b")
    p_cmp.set_defaults(fn=cmd_compare)

    p_gc = sub.add_parser("gradcheck", help="finite-difference check of the routed loss")
    p_gc.add_argument("--topology", choices=("m1", "m2", "m3", "m4"), default="m1")
    p_gc.add_argument("--seed", type=int, default=0)
    p_gc.set_defaults(fn=cmd_gradcheck)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())

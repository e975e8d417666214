"""Command-line entry point: ``hallucinet {run,sweep,eval,gen}``.

Exit codes: 0 ok, 1 configuration error, 2 data error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import checkpoint
from .checkpoint import CheckpointFormatError, atomic_write_bytes
from .data import (
    DataError,
    MultimodalDataset,
    Normalizer,
    band_split,
    generate_synthetic,
    load_datacube,
    load_paired_images,
    write_hnim,
    write_manifest,
)
from .networks import (
    CheckpointMismatchError,
    FusionLayer,
    HallucinatedTwoStreamNet,
    LayerSpec,
    ModalityError,
    ShapeChainError,
    TwoStreamNet,
    build_stream,
    default_stream_spec,
    load_state_dict,
    reduce_depth,
)
from .pipeline import (
    NETWORKS,
    ConfigError,
    DistillationConfig,
    evaluate,
    metrics_csv,
    run_full_pipeline,
)

log = logging.getLogger("hallucinet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
SOURCES = ("synthetic", "datacube", "manifest")
SWEEP_PARAMS = ("alpha", "lambda", "temperature", "depth", "train_ratio")

SYNTHETIC_DEFAULTS = {"classes": 4, "n_per_class": 500, "d1": 16, "d2": 16, "noise_sigma": 0.05, "leak": 0.3}


@dataclass
class ExperimentConfig:
    source: str
    source_params: dict
    distillation: DistillationConfig
    which_modality_missing: int = 2
    n_runs: int = 1
    out: str | None = None
    train_ratio: float = 0.5
    val_fraction: float = 0.05
    normalization: str = "standardize"
    architecture: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.distillation.seed


def _section(d: dict, key: str) -> dict:
    value = d.get(key) or {}
    if not isinstance(value, dict):
        raise ConfigError(key, "must be a mapping")
    return value


def parse_experiment(raw: dict, base_dir: Path = Path(".")) -> ExperimentConfig:
    """Validate a parsed YAML document; relative paths resolve against ``base_dir``."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping")
    raw = copy.deepcopy(raw)
    known = {"seed", "n_runs", "which_modality_missing", "out", "data", "distillation", "architecture"}
    for key in raw:
        if key not in known:
            raise ConfigError(key, "unknown top-level key")
    data = _section(raw, "data")
    source = data.get("source", "synthetic")
    if source not in SOURCES:
        raise ConfigError("data.source", f"must be one of {SOURCES}, got {source!r}")
    params = dict(_section(data, source))
    if source == "synthetic":
        unknown = set(params) - set(SYNTHETIC_DEFAULTS) - {"seed"}
        if unknown:
            raise ConfigError(f"data.synthetic.{sorted(unknown)[0]}", "unknown key")
        params = {**SYNTHETIC_DEFAULTS, **params}
        if params["classes"] % 2 or params["classes"] < 2:
            raise ConfigError("data.synthetic.classes", "must be even and >= 2")
    else:
        if "path" not in params:
            raise ConfigError(f"data.{source}.path", "required")
        path = Path(params["path"])
        if not path.is_absolute():
            path = base_dir / path
        if not path.exists():
            raise ConfigError(f"data.{source}.path", f"file does not exist: {path}")
        params["path"] = str(path)
        if source == "datacube":
            params.setdefault("cut_index", 52)

    dist = dict(_section(raw, "distillation"))
    if "seed" in raw:
        dist["seed"] = raw["seed"]
    try:
        distillation = DistillationConfig.from_dict(dist)
    except ConfigError as exc:
        raise ConfigError(f"distillation.{exc.field}" if exc.field != "seed" else "seed",
                          str(exc).split(": ", 1)[1]) from None
    except TypeError as exc:
        raise ConfigError("distillation", str(exc)) from None

    n_runs = raw.get("n_runs", 1)
    if not isinstance(n_runs, int) or n_runs < 1:
        raise ConfigError("n_runs", f"must be an integer >= 1, got {n_runs!r}")
    missing = raw.get("which_modality_missing", 2)
    if missing not in (1, 2):
        raise ConfigError("which_modality_missing", f"must be 1 or 2, got {missing!r}")
    train_ratio = data.get("train_ratio", 0.5)
    val_fraction = data.get("val_fraction", 0.05)
    for name, v in (("data.train_ratio", train_ratio), ("data.val_fraction", val_fraction)):
        if not isinstance(v, (int, float)) or not 0 < v < 1:
            raise ConfigError(name, f"must lie in (0, 1), got {v!r}")
    normalization = data.get("normalization", "standardize")
    if normalization not in ("standardize", "none"):
        raise ConfigError("data.normalization", f"must be 'standardize' or 'none', got {normalization!r}")

    arch = dict(_section(raw, "architecture"))
    for key in arch:
        if key not in ("stream1", "stream2", "depth_decrement"):
            raise ConfigError(f"architecture.{key}", "unknown key")
    for key in ("stream1", "stream2"):
        if key in arch:
            try:
                arch[key] = [LayerSpec.from_dict(layer) for layer in arch[key]]
            except (TypeError, ShapeChainError, AttributeError) as exc:
                raise ConfigError(f"architecture.{key}", str(exc)) from None
    depth = arch.get("depth_decrement", 0)
    if not isinstance(depth, int) or depth < 0:
        raise ConfigError("architecture.depth_decrement", "must be a non-negative integer")

    return ExperimentConfig(
        source=source, source_params=params, distillation=distillation,
        which_modality_missing=missing, n_runs=n_runs, out=raw.get("out"),
        train_ratio=float(train_ratio), val_fraction=float(val_fraction),
        normalization=normalization, architecture=arch, raw=raw,
    )


def load_yaml(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError("--config", f"file does not exist: {path}")
    try:
        return yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError("--config", f"not valid YAML: {exc}") from None


def load_experiment(path) -> ExperimentConfig:
    return parse_experiment(load_yaml(path), Path(path).parent)


def load_dataset(cfg: ExperimentConfig, seed: int | None = None) -> MultimodalDataset:
    p = cfg.source_params
    if cfg.source == "synthetic":
        data_seed = p.get("seed", cfg.seed if seed is None else seed)
        return generate_synthetic(p["classes"], p["n_per_class"], p["d1"], p["d2"],
                                  p["noise_sigma"], p["leak"], np.random.default_rng(data_seed))
    if cfg.source == "datacube":
        return band_split(load_datacube(p["path"]), int(p["cut_index"]))
    dataset = load_paired_images(p["path"])
    if len(dataset) == 0:
        raise DataError(f"{p['path']}: manifest lists no samples")
    return dataset


def experiment_specs(cfg: ExperimentConfig, dataset: MultimodalDataset):
    C = dataset.num_classes
    return (stream_spec_for(cfg, dataset.shape1, C, 1), stream_spec_for(cfg, dataset.shape2, C, 2))


# --- run ---------------------------------------------------------------------------

def _run_one(raw: dict, base_dir: str, seed: int, run_dir: str) -> str:
    cfg = parse_experiment(raw, Path(base_dir))
    cfg.distillation = cfg.distillation.replace(seed=seed)
    dataset = load_dataset(cfg, seed)
    specs = experiment_specs(cfg, dataset)
    artifacts = run_full_pipeline(
        dataset, cfg.distillation, cfg.which_modality_missing, specs=specs,
        train_ratio=cfg.train_ratio, val_fraction=cfg.val_fraction,
        normalization=cfg.normalization, out_dir=run_dir,
    )
    return metrics_csv(artifacts.metrics)


def _map(fn, argsets, jobs: int):
    if jobs <= 1 or len(argsets) <= 1:
        return [fn(*a) for a in argsets]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(fn, *a) for a in argsets]
        return [f.result() for f in futures]


def read_metrics_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and list(rows[0].keys()) != ["network", "class", "accuracy"]:
        raise DataError("metrics CSV must have header network,class,accuracy")
    for r in rows:
        r["accuracy"] = float(r["accuracy"])
    return rows


def aggregate(per_run_csv: list[str]) -> list[dict]:
    """Mean and sample standard deviation per (network, class) across runs."""
    values: dict[tuple[str, str], list[float]] = {}
    for text in per_run_csv:
        for r in read_metrics_csv(text):
            values.setdefault((r["network"], r["class"]), []).append(r["accuracy"])
    rows = []
    for (network, cls), vals in values.items():
        arr = np.asarray(vals, dtype=np.float64)
        std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        rows.append({"network": network, "class": cls, "mean": float(arr.mean()), "std": std, "n_runs": arr.size})
    return rows


def aggregate_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["network", "class", "mean", "std", "n_runs"])
    for r in rows:
        w.writerow([r["network"], r["class"], repr(r["mean"]), repr(r["std"]), r["n_runs"]])
    return buf.getvalue()


def read_aggregate_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and list(rows[0].keys()) != ["network", "class", "mean", "std", "n_runs"]:
        raise DataError("aggregate CSV must have header network,class,mean,std,n_runs")
    return [{"network": r["network"], "class": r["class"], "mean": float(r["mean"]),
             "std": float(r["std"]), "n_runs": int(r["n_runs"])} for r in rows]


def execute_runs(raw: dict, base_dir: Path, seed: int, n_runs: int, out: Path, jobs: int) -> list[dict]:
    argsets = [(raw, str(base_dir), seed + i, str(out / f"run_{i:03d}")) for i in range(n_runs)]
    per_run = _map(_run_one, argsets, jobs)
    rows = aggregate(per_run)
    atomic_write_bytes(out / "aggregate.csv", aggregate_csv(rows).encode())
    return rows


def cmd_run(args) -> int:
    cfg = load_experiment(args.config)
    if args.seed is not None:
        cfg.raw["seed"] = args.seed
        cfg = parse_experiment(cfg.raw, Path(args.config).parent)
    out = Path(args.out or cfg.out or "runs")
    rows = execute_runs(cfg.raw, Path(args.config).parent, cfg.seed, cfg.n_runs, out, args.jobs)
    for r in rows:
        if r["class"] == "overall":
            print(f"{r['network']:<26} {r['mean']:7.2f} ± {r['std']:.2f}  (n={r['n_runs']})")
    print(f"wrote {out / 'aggregate.csv'}")
    return EXIT_OK


# --- sweep -------------------------------------------------------------------------

def parse_sweep(raw: dict, sweep_path: Path) -> tuple[str, list, dict, Path]:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "sweep file must be a mapping")
    param = raw.get("param")
    if param not in SWEEP_PARAMS:
        raise ConfigError("param", f"must be one of {SWEEP_PARAMS}, got {param!r}")
    values = raw.get("values")
    if not isinstance(values, list) or not values:
        raise ConfigError("values", "must be a non-empty list")
    base = raw.get("base")
    base_dir = sweep_path.parent
    if isinstance(base, str):
        base_path = base_dir / base if not Path(base).is_absolute() else Path(base)
        base_raw = load_yaml(base_path)
        base_dir = base_path.parent
    elif isinstance(base, dict):
        base_raw = base
    else:
        raise ConfigError("base", "must be a config path or an inline mapping")
    for v in values:
        _check_sweep_value(param, v)
    return param, values, base_raw, base_dir


def _check_sweep_value(param: str, v) -> None:
    ok = isinstance(v, (int, float)) and not isinstance(v, bool)
    if ok and param in ("alpha", "lambda"):
        ok = 0 <= v <= 1
    elif ok and param == "temperature":
        ok = v > 0
    elif ok and param == "train_ratio":
        ok = 0 < v < 1
    elif ok and param == "depth":
        ok = isinstance(v, int) and v >= 0
    if not ok:
        raise ConfigError("values", f"{v!r} is not a legal {param} value")


def apply_sweep_value(raw: dict, param: str, value) -> dict:
    raw = copy.deepcopy(raw)
    if param in ("alpha", "lambda", "temperature"):
        raw.setdefault("distillation", {})
        raw["distillation"] = dict(raw["distillation"] or {})
        raw["distillation"][param] = value
        if param == "lambda":
            raw["distillation"].pop("lam", None)
    elif param == "train_ratio":
        raw["data"] = dict(raw.get("data") or {})
        raw["data"]["train_ratio"] = value
    elif param == "depth":
        raw["architecture"] = dict(raw.get("architecture") or {})
        raw["architecture"]["depth_decrement"] = value
    return raw


def sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["param", "value", "network", "mean_acc", "std_acc"])
    for r in rows:
        w.writerow([r["param"], r["value"], r["network"], repr(r["mean_acc"]), repr(r["std_acc"])])
    return buf.getvalue()


def read_sweep_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and list(rows[0].keys()) != ["param", "value", "network", "mean_acc", "std_acc"]:
        raise DataError("sweep CSV must have header param,value,network,mean_acc,std_acc")
    return [{**r, "mean_acc": float(r["mean_acc"]), "std_acc": float(r["std_acc"])} for r in rows]


def cmd_sweep(args) -> int:
    sweep_path = Path(args.config)
    param, values, base_raw, base_dir = parse_sweep(load_yaml(sweep_path), sweep_path)
    if args.seed is not None:
        base_raw = {**base_raw, "seed": args.seed}
    cells = []
    for v in values:
        raw = apply_sweep_value(base_raw, param, v)
        cells.append((v, raw, parse_experiment(raw, base_dir)))  # validate every cell up front
    out = Path(args.out or base_raw.get("out") or "sweeps")
    argsets, owners = [], []
    for v, raw, cfg in cells:
        for i in range(cfg.n_runs):
            argsets.append((raw, str(base_dir), cfg.seed + i, str(out / f"{param}_{v}" / f"run_{i:03d}")))
            owners.append(v)
    results = _map(_run_one, argsets, args.jobs)
    rows = []
    for v, _, _ in cells:
        agg = aggregate([r for r, owner in zip(results, owners) if owner == v])
        atomic_write_bytes(out / f"{param}_{v}" / "aggregate.csv", aggregate_csv(agg).encode())
        for r in agg:
            if r["class"] == "overall":
                rows.append({"param": param, "value": v, "network": r["network"],
                             "mean_acc": r["mean"], "std_acc": r["std"]})
    atomic_write_bytes(out / "sweep.csv", sweep_csv(rows).encode())
    print(sweep_csv(rows), end="")
    return EXIT_OK


# --- eval --------------------------------------------------------------------------

def _kind_from_names(names, stem: str) -> str:
    if any(n.startswith("available.") for n in names):
        return "hallucinated_two_stream"
    if any(n.startswith("stream1.") for n in names):
        return "two_stream"
    if stem in ("stream2", "hall_net"):
        return stem
    return "stream1"


def stream_spec_for(cfg: ExperimentConfig, shape, num_classes: int, m: int) -> list[LayerSpec]:
    spec = cfg.architecture.get(f"stream{m}") or default_stream_spec(shape, num_classes, m)
    depth = cfg.architecture.get("depth_decrement", 0)
    return reduce_depth(spec, depth) if depth else list(spec)


def build_from_checkpoint(path, cfg: ExperimentConfig, dataset: MultimodalDataset):
    """Rebuild the network a checkpoint belongs to and load its weights."""
    state = checkpoint.load(path)
    kind = _kind_from_names(state, Path(path).stem)
    missing = cfg.which_modality_missing
    available = 3 - missing
    needed = {"two_stream": (1, 2), "stream1": (1,), "stream2": (2,),
              "hall_net": (available,), "hallucinated_two_stream": (available,)}[kind]
    shapes = {1: dataset.shape1, 2: dataset.shape2}
    for m in needed:
        if shapes[m] is None:
            raise ModalityError(f"{kind} needs modality {m}, which the evaluation data does not provide")
    C = dataset.num_classes
    rng = np.random.default_rng(0)

    def make(m):
        return build_stream(stream_spec_for(cfg, shapes[m], C, m), shapes[m], C, rng, m)

    try:
        if kind == "two_stream":
            net = TwoStreamNet(make(1), make(2), FusionLayer(C))
        elif kind == "hallucinated_two_stream":
            net = HallucinatedTwoStreamNet(make(available), make(available), FusionLayer(C), missing)
        else:
            net = make({"stream1": 1, "stream2": 2}.get(kind, available))
    except ShapeChainError as exc:
        raise CheckpointMismatchError(str(exc)) from None
    load_state_dict(net, state)
    return kind, net


def cmd_eval(args) -> int:
    cfg = load_experiment(args.config)
    ckpt = Path(args.checkpoint)
    seed = args.seed
    summary_path = ckpt.parent / "summary.json"
    if seed is None and summary_path.exists():
        # synthetic data is drawn from the run's seed; reuse it so eval sees the same task
        seed = json.loads(summary_path.read_text()).get("config", {}).get("seed")
    dataset = load_dataset(cfg, seed)
    if args.modality == "1":
        dataset = dataset.drop_modality(2) if dataset.x2 is not None else dataset
    elif args.modality == "2":
        dataset = dataset.drop_modality(1) if dataset.x1 is not None else dataset
    if len(dataset) == 0:
        raise DataError("evaluation dataset is empty")
    norm_path = ckpt.parent / "normalization.json"
    if norm_path.exists():
        dataset = Normalizer.from_dict(json.loads(norm_path.read_text())).apply(dataset)
    else:
        log.warning("no normalization.json next to %s; evaluating raw inputs", ckpt)
    kind, net = build_from_checkpoint(ckpt, cfg, dataset)
    metrics = evaluate(net, dataset)
    for c in sorted(metrics.class_total):
        print(f"class {c}: {metrics.class_correct[c]}/{metrics.class_total[c]} "
              f"({metrics.class_accuracy[c]:.2f}%)")
    correct = sum(metrics.class_correct.values())
    total = sum(metrics.class_total.values())
    print(f"overall: {correct}/{total} ({metrics.overall_accuracy:.2f}%)")
    out = Path(args.out or ".")
    atomic_write_bytes(out / f"eval_{kind}.csv", metrics_csv({kind: metrics}).encode())
    return EXIT_OK


# --- gen ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    raw = load_yaml(args.config) if args.config else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    raw.setdefault("data", {})
    raw["data"] = {**(raw["data"] or {}), "source": "synthetic"}
    cfg = parse_experiment(raw, Path(args.config).parent if args.config else Path("."))
    dataset = load_dataset(cfg)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from None
    if not os.access(out, os.W_OK):
        raise DataError(f"output directory is not writable: {out}")
    rows = []
    for i in range(len(dataset)):
        p1, p2 = f"m1/{i:06d}.hnim", f"m2/{i:06d}.hnim"
        write_hnim(out / p1, dataset.x1[i])
        write_hnim(out / p2, dataset.x2[i])
        rows.append((p1, p2, int(dataset.labels[i])))
    write_manifest(out / "manifest.tsv", dataset.num_classes, rows)
    print(f"wrote {len(rows)} samples to {out / 'manifest.tsv'}")
    return EXIT_OK


# --- entry -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hallucinet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the four-step pipeline n_runs times and aggregate")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="sweep one hyperparameter and tabulate accuracies")
    p.add_argument("--config", required=True, help="sweep file (param, values, base)")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--modality", choices=("1", "2", "both"), default="both")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, help="synthetic data seed (default: the run's seed from summary.json)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gen", help="write a synthetic dataset as HNIM files plus a manifest")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("HALLUCINET_LOG", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        print(f"config error: HALLUCINET_LOG: unknown level {level!r}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("hallucinet").setLevel(level)
    args = build_parser().parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        print("config error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ModalityError, CheckpointMismatchError, CheckpointFormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - mapped to the documented exit code
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

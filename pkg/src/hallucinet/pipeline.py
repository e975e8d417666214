"""Four-step training of the hallucinated two-stream classifier.

1. train each modality stream alone with cross-entropy;
2. warm-start both streams into a two-stream net with learned late fusion
   and train it jointly;
3. freeze the missing modality's stream (the teacher) and train a
   hallucination stream on the available modality with the generalized
   distillation loss;
4. pair the available stream with the frozen hallucination stream and
   fine-tune with cross-entropy.

Every step keeps the best-validation snapshot (accuracy, then lower loss).
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint
from .data import MultimodalDataset, Normalizer, SplitIndices, normalize, split
from .losses import cross_entropy, gd_loss, one_hot
from .networks import (
    FusionLayer,
    HallucinatedTwoStreamNet,
    LayerSpec,
    ModalityError,
    StreamNet,
    TwoStreamNet,
    build_stream,
    clone,
    default_stream_spec,
    load_state_dict,
    predict,
    set_frozen,
    state_dict,
)
from .tensor import backward, make_optimizer, no_grad, tempered_softmax, update_step

log = logging.getLogger(__name__)

NETWORKS = ("stream1", "stream2", "two_stream", "hall_net", "hallucinated_two_stream")

# independent RNG streams derived from the run seed
_SPLIT, _INIT1, _INIT2, _INIT_HALL, _SHUF1, _SHUF2, _SHUF_TWO, _SHUF_HALL, _SHUF_FT = range(9)


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class EmptySplitError(ValueError):
    pass


def rng_for(seed: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), purpose])


@dataclass
class DistillationConfig:
    alpha: float = 0.5
    lam: float = 0.5
    temperature: float = 10.0
    gamma: float = 1e-3
    lr_individual: float = 3e-4
    lr_two_stream: float = 1.5e-4
    lr_hall: float = 3e-4
    epochs_individual: int = 100
    epochs_two_stream: int = 200
    epochs_hall: int = 100
    epochs_finetune: int = 100
    batch_size: int = 64
    seed: int = 0
    optimizer: str = "adam"
    hard_label_source: str = "teacher"  # or "ground_truth"
    finetune_mode: str = "full"  # or "fusion_only"

    def __post_init__(self):
        for name in ("alpha", "lam"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(name, f"must lie in [0, 1], got {v}")
        if not self.temperature > 0:
            raise ConfigError("temperature", f"must be positive, got {self.temperature}")
        if self.gamma < 0:
            raise ConfigError("gamma", f"must be non-negative, got {self.gamma}")
        for name in ("lr_individual", "lr_two_stream", "lr_hall"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, "must be positive")
        for name in ("epochs_individual", "epochs_two_stream", "epochs_hall", "epochs_finetune", "batch_size"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(name, f"must be an integer >= 1, got {v!r}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigError("seed", "must be an unsigned 64-bit integer")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer", f"must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.hard_label_source not in ("teacher", "ground_truth"):
            raise ConfigError("hard_label_source", f"must be 'teacher' or 'ground_truth', got {self.hard_label_source!r}")
        if self.finetune_mode not in ("full", "fusion_only"):
            raise ConfigError("finetune_mode", f"must be 'full' or 'fusion_only', got {self.finetune_mode!r}")

    @classmethod
    def hyperspectral(cls, **overrides) -> DistillationConfig:
        base = dict(lr_individual=6e-4, lr_two_stream=3e-4, lr_hall=6e-4)
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes) -> DistillationConfig:
        return DistillationConfig(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> DistillationConfig:
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown distillation key")
        return cls(**d)


@dataclass
class Metrics:
    overall_accuracy: float
    class_accuracy: dict[int, float]
    class_correct: dict[int, int]
    class_total: dict[int, int]
    history: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "overall_accuracy": self.overall_accuracy,
            "class_accuracy": {str(k): v for k, v in self.class_accuracy.items()},
            "class_correct": {str(k): v for k, v in self.class_correct.items()},
            "class_total": {str(k): v for k, v in self.class_total.items()},
            "history": self.history,
        }


def metrics_from_predictions(pred: np.ndarray, labels: np.ndarray) -> Metrics:
    if labels.size == 0:
        raise EmptySplitError("cannot evaluate on an empty split")
    correct, total, acc = {}, {}, {}
    for c in np.unique(labels):
        mask = labels == c
        total[int(c)] = int(mask.sum())
        correct[int(c)] = int((pred[mask] == c).sum())
        acc[int(c)] = 100.0 * correct[int(c)] / total[int(c)]
    overall = 100.0 * float((pred == labels).sum()) / labels.size
    return Metrics(overall, acc, correct, total)


def _inputs(net, dataset: MultimodalDataset, idx) -> list[np.ndarray]:
    out = []
    for m in net.modalities:
        x = dataset.modality(m)
        if x is None:
            raise ModalityError(f"network needs modality {m}, which the dataset does not provide")
        out.append(x[idx])
    return out


def _logits(net, dataset: MultimodalDataset, idx, batch: int = 512) -> np.ndarray:
    chunks = []
    with no_grad():
        for start in range(0, len(idx), batch):
            chunks.append(net(*_inputs(net, dataset, idx[start:start + batch])).data)
    return np.concatenate(chunks) if chunks else np.zeros((0, net.num_classes), np.float32)


def evaluate(net, dataset: MultimodalDataset, indices=None, needs=None) -> Metrics:
    """Overall and per-class accuracy; never mutates parameters."""
    if needs is not None and tuple(sorted(set(needs))) != tuple(sorted(net.modalities)):
        raise ModalityError(f"network consumes modalities {net.modalities}, got {sorted(set(needs))}")
    idx = np.arange(len(dataset)) if indices is None else np.asarray(indices)
    if idx.size == 0:
        raise EmptySplitError("cannot evaluate on an empty split")
    return metrics_from_predictions(predict(_logits(net, dataset, idx)), dataset.labels[idx])


def _fit(net, params, batch_loss: Callable, val_loss: Callable, train_idx: np.ndarray,
         epochs: int, lr: float, config: DistillationConfig, rng: np.random.Generator,
         val_accuracy: Callable) -> list[dict]:
    """Minibatch training with best-validation snapshot restore."""
    opt = make_optimizer(config.optimizer)
    best_key, best_state = None, None
    history = []
    bs = config.batch_size
    for epoch in range(1, epochs + 1):
        order = rng.permutation(train_idx)
        total = 0.0
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            loss = batch_loss(idx)
            total += float(loss.item()) * len(idx)
            backward(loss)
            update_step(params, lr, opt)
        with no_grad():
            vloss = float(val_loss().item())
        vacc = val_accuracy()
        history.append({"epoch": epoch, "train_loss": total / len(order), "val_loss": vloss, "val_acc": vacc})
        key = (vacc, -vloss)
        if best_key is None or key > best_key:
            best_key, best_state = key, state_dict(net)
    load_state_dict(net, best_state)
    return history


def _require_split(split_: SplitIndices) -> None:
    for name in ("train", "validation", "test"):
        if len(getattr(split_, name)) == 0:
            raise EmptySplitError(f"{name} split is empty")


def _ce_of(logits, y):
    return cross_entropy(y, tempered_softmax(logits, 1.0))


def train_stream(net: StreamNet, dataset: MultimodalDataset, split_: SplitIndices,
                 config: DistillationConfig, rng: np.random.Generator,
                 epochs: int | None = None, lr: float | None = None) -> Metrics:
    """Cross-entropy training of a single stream; returns test metrics."""
    _require_split(split_)
    x = dataset.modality(net.modality)
    y = one_hot(dataset.labels, dataset.num_classes)
    val = split_.validation

    history = _fit(
        net, net.parameters(),
        batch_loss=lambda idx: _ce_of(net(x[idx]), y[idx]),
        val_loss=lambda: _ce_of(net(x[val]), y[val]),
        train_idx=split_.train,
        epochs=epochs or config.epochs_individual,
        lr=lr or config.lr_individual,
        config=config, rng=rng,
        val_accuracy=lambda: evaluate(net, dataset, val).overall_accuracy,
    )
    metrics = evaluate(net, dataset, split_.test)
    metrics.history = history
    return metrics


def step1_train_individual(dataset: MultimodalDataset, split_: SplitIndices, specs, config: DistillationConfig):
    """Train both modality streams independently; returns (stream1, stream2, m1, m2)."""
    if dataset.x1 is None or dataset.x2 is None:
        raise ModalityError("step 1 needs both modalities")
    spec1, spec2 = specs
    streams, metrics = [], []
    for m, spec, shape, init, shuf in ((1, spec1, dataset.shape1, _INIT1, _SHUF1),
                                       (2, spec2, dataset.shape2, _INIT2, _SHUF2)):
        net = build_stream(spec, shape, dataset.num_classes, rng_for(config.seed, init), modality=m)
        metrics.append(train_stream(net, dataset, split_, config, rng_for(config.seed, shuf)))
        streams.append(net)
        log.info("step 1: stream %d test accuracy %.2f%%", m, metrics[-1].overall_accuracy)
    return streams[0], streams[1], metrics[0], metrics[1]


def _fused_objective(net, inputs, y):
    return _ce_of(net(*inputs), y) + net.fusion.regularizer()


def step2_train_two_stream(dataset: MultimodalDataset, split_: SplitIndices, stream1: StreamNet,
                           stream2: StreamNet, config: DistillationConfig, warm_start: bool = True):
    """Joint training of both streams and the fusion layer (the teacher-bearing model)."""
    _require_split(split_)
    if stream1.num_classes != stream2.num_classes:
        raise ValueError("step-1 streams disagree on the number of classes")
    if stream1.input_shape != dataset.shape1 or stream2.input_shape != dataset.shape2:
        raise ValueError(
            f"stream inputs {stream1.input_shape}/{stream2.input_shape} do not match the dataset "
            f"{dataset.shape1}/{dataset.shape2}"
        )
    if warm_start:
        s1, s2 = clone(stream1), clone(stream2)
    else:
        s1 = build_stream(stream1.specs, stream1.input_shape, stream1.num_classes,
                          rng_for(config.seed, _INIT1), modality=1)
        s2 = build_stream(stream2.specs, stream2.input_shape, stream2.num_classes,
                          rng_for(config.seed, _INIT2), modality=2)
    set_frozen(s1, False)
    set_frozen(s2, False)
    net = TwoStreamNet(s1, s2, FusionLayer(dataset.num_classes, config.gamma))
    y = one_hot(dataset.labels, dataset.num_classes)
    x1, x2, val = dataset.x1, dataset.x2, split_.validation
    history = _fit(
        net, net.parameters(),
        batch_loss=lambda idx: _fused_objective(net, (x1[idx], x2[idx]), y[idx]),
        val_loss=lambda: _fused_objective(net, (x1[val], x2[val]), y[val]),
        train_idx=split_.train,
        epochs=config.epochs_two_stream, lr=config.lr_two_stream,
        config=config, rng=rng_for(config.seed, _SHUF_TWO),
        val_accuracy=lambda: evaluate(net, dataset, val).overall_accuracy,
    )
    metrics = evaluate(net, dataset, split_.test)
    metrics.history = history
    log.info("step 2: two-stream test accuracy %.2f%%", metrics.overall_accuracy)
    return net, metrics


def _check_missing(missing: int) -> int:
    if missing not in (1, 2):
        raise ModalityError(f"missing modality must be 1 or 2, got {missing}")
    return 3 - missing


def step3_train_hallucination(dataset: MultimodalDataset, split_: SplitIndices, two_stream: TwoStreamNet,
                              missing: int, config: DistillationConfig, hall_spec=None):
    """Distill the frozen missing-modality stream into a stream fed the available modality.

    Returns (hall_net, metrics, teacher). The teacher is a frozen copy of the
    step-2 stream; its parameters are never updated.
    """
    _require_split(split_)
    available = _check_missing(missing)
    teacher = clone(two_stream.stream1 if missing == 1 else two_stream.stream2)
    set_frozen(teacher, True)
    avail_stream = two_stream.stream1 if available == 1 else two_stream.stream2
    spec = hall_spec if hall_spec is not None else avail_stream.specs
    hall = build_stream(spec, avail_stream.input_shape, dataset.num_classes,
                        rng_for(config.seed, _INIT_HALL), modality=available)

    all_idx = np.arange(len(dataset))
    teacher_logits = _logits(teacher, dataset, all_idx)
    x = dataset.modality(available)
    labels = dataset.labels if config.hard_label_source == "ground_truth" else None
    val = split_.validation

    def objective(idx):
        return gd_loss(teacher_logits[idx], hall(x[idx]), config.alpha, config.lam,
                       config.temperature, None if labels is None else labels[idx])

    history = _fit(
        hall, hall.parameters(),
        batch_loss=objective,
        val_loss=lambda: objective(val),
        train_idx=split_.train,
        epochs=config.epochs_hall, lr=config.lr_hall,
        config=config, rng=rng_for(config.seed, _SHUF_HALL),
        val_accuracy=lambda: evaluate(hall, dataset, val).overall_accuracy,
    )
    metrics = evaluate(hall, dataset, split_.test)
    metrics.history = history
    log.info("step 3: hallucination net test accuracy %.2f%%", metrics.overall_accuracy)
    return hall, metrics, teacher


def step4_finetune_hallucinated(dataset: MultimodalDataset, split_: SplitIndices, two_stream: TwoStreamNet,
                                hall_net: StreamNet, missing: int, config: DistillationConfig):
    """Fine-tune the available stream and fusion with the hallucination stream frozen."""
    _require_split(split_)
    available = _check_missing(missing)
    if hall_net.modality != available:
        raise ModalityError(
            f"hallucination net consumes modality {hall_net.modality}, but modality {available} is the available one"
        )
    avail_stream = clone(two_stream.stream1 if available == 1 else two_stream.stream2)
    hall = clone(hall_net)
    set_frozen(avail_stream, config.finetune_mode == "fusion_only")
    set_frozen(hall, True)
    fusion = clone(two_stream.fusion)
    set_frozen(fusion, False)
    net = HallucinatedTwoStreamNet(avail_stream, hall, fusion, missing)
    y = one_hot(dataset.labels, dataset.num_classes)
    x = dataset.modality(available)
    val = split_.validation
    history = _fit(
        net, net.parameters(),
        batch_loss=lambda idx: _fused_objective(net, (x[idx],), y[idx]),
        val_loss=lambda: _fused_objective(net, (x[val],), y[val]),
        train_idx=split_.train,
        epochs=config.epochs_finetune, lr=config.lr_two_stream,
        config=config, rng=rng_for(config.seed, _SHUF_FT),
        val_accuracy=lambda: evaluate(net, dataset, val).overall_accuracy,
    )
    metrics = evaluate(net, dataset, split_.test)
    metrics.history = history
    log.info("step 4: hallucinated two-stream test accuracy %.2f%%", metrics.overall_accuracy)
    return net, metrics


@dataclass
class PipelineArtifacts:
    networks: dict
    metrics: dict[str, Metrics]
    split: SplitIndices
    normalizer: Normalizer
    checkpoints: dict[str, str] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)


def resolve_specs(dataset: MultimodalDataset, specs=None):
    s1 = s2 = None
    if specs is not None:
        s1, s2 = specs
    if s1 is None:
        s1 = default_stream_spec(dataset.shape1, dataset.num_classes, 1)
    if s2 is None:
        s2 = default_stream_spec(dataset.shape2, dataset.num_classes, 2)
    as_spec = lambda spec: [s if isinstance(s, LayerSpec) else LayerSpec.from_dict(s) for s in spec]
    return as_spec(s1), as_spec(s2)


def prepare(dataset: MultimodalDataset, config: DistillationConfig, train_ratio: float = 0.5,
            val_fraction: float = 0.05, normalization: str = "standardize"):
    split_ = split(dataset, train_ratio, val_fraction, rng_for(config.seed, _SPLIT))
    normed, normalizer = normalize(dataset, split_.train, normalization)
    return normed, split_, normalizer


def metrics_csv(metrics: dict[str, Metrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["network", "class", "accuracy"])
    for name, m in metrics.items():
        w.writerow([name, "overall", repr(m.overall_accuracy)])
        for c, acc in sorted(m.class_accuracy.items()):
            w.writerow([name, c, repr(acc)])
    return buf.getvalue()


def curves_csv(metrics: dict[str, Metrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["network", "epoch", "train_loss", "val_loss", "val_acc"])
    for name, m in metrics.items():
        for h in m.history:
            w.writerow([name, h["epoch"], repr(h["train_loss"]), repr(h["val_loss"]), repr(h["val_acc"])])
    return buf.getvalue()


def run_full_pipeline(dataset: MultimodalDataset, config: DistillationConfig, which_modality_missing: int = 2,
                      *, specs=None, train_ratio: float = 0.5, val_fraction: float = 0.05,
                      normalization: str = "standardize", out_dir=None) -> PipelineArtifacts:
    """Run steps 1-4 in order; optionally persist checkpoints, CSVs and a JSON summary."""
    _check_missing(which_modality_missing)
    if dataset.x1 is None or dataset.x2 is None:
        raise ModalityError("training needs both modalities")
    normed, split_, normalizer = prepare(dataset, config, train_ratio, val_fraction, normalization)
    spec1, spec2 = resolve_specs(normed, specs)

    s1, s2, m1, m2 = step1_train_individual(normed, split_, (spec1, spec2), config)
    two, m_two = step2_train_two_stream(normed, split_, s1, s2, config)
    hall, m_hall, _ = step3_train_hallucination(normed, split_, two, which_modality_missing, config)
    final, m_final = step4_finetune_hallucinated(normed, split_, two, hall, which_modality_missing, config)

    networks = dict(zip(NETWORKS, (s1, s2, two, hall, final)))
    metrics = dict(zip(NETWORKS, (m1, m2, m_two, m_hall, m_final)))
    artifacts = PipelineArtifacts(networks, metrics, split_, normalizer)
    artifacts.summary = {
        "config": config.to_dict(),
        "which_modality_missing": which_modality_missing,
        "train_ratio": train_ratio,
        "val_fraction": val_fraction,
        "normalization": normalization,
        "split_sizes": {"train": int(split_.train.size), "validation": int(split_.validation.size),
                        "test": int(split_.test.size)},
        "architecture": {"stream1": [s.to_dict() for s in spec1], "stream2": [s.to_dict() for s in spec2]},
        "metrics": {name: m.to_dict() for name, m in metrics.items()},
        "checkpoints": {name: f"{name}.hnck" for name in NETWORKS},
    }
    if out_dir is not None:
        write_artifacts(artifacts, out_dir)
    return artifacts


def write_artifacts(artifacts: PipelineArtifacts, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, net in artifacts.networks.items():
        path = out / f"{name}.hnck"
        checkpoint.save(net, path)
        artifacts.checkpoints[name] = str(path)
    checkpoint.atomic_write_bytes(out / "normalization.json",
                                  json.dumps(artifacts.normalizer.to_dict(), sort_keys=True).encode())
    checkpoint.atomic_write_bytes(out / "metrics.csv", metrics_csv(artifacts.metrics).encode())
    checkpoint.atomic_write_bytes(out / "curves.csv", curves_csv(artifacts.metrics).encode())
    checkpoint.atomic_write_bytes(out / "summary.json",
                                  (json.dumps(artifacts.summary, indent=2, sort_keys=True) + "\n").encode())

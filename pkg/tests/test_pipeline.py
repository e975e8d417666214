import json

import numpy as np
import pytest

from hallucinet import checkpoint
from hallucinet.data import MultimodalDataset, generate_synthetic, split
from hallucinet.networks import (
    FusionLayer,
    ModalityError,
    TwoStreamNet,
    build_stream,
    hs_stream_spec,
    state_dict,
)
from hallucinet.pipeline import (
    NETWORKS,
    ConfigError,
    DistillationConfig,
    EmptySplitError,
    evaluate,
    metrics_csv,
    metrics_from_predictions,
    prepare,
    resolve_specs,
    run_full_pipeline,
    step1_train_individual,
    step2_train_two_stream,
    step3_train_hallucination,
    step4_finetune_hallucinated,
)

FAST = dict(epochs_individual=15, epochs_two_stream=15, epochs_hall=15, epochs_finetune=10,
            lr_individual=3e-3, lr_two_stream=3e-3, lr_hall=3e-3, batch_size=32)


def synthetic(n_per_class=100, leak=0.3, seed=0, C=4):
    return generate_synthetic(C, n_per_class, 16, 16, 0.05, leak, np.random.default_rng(seed))


def bytes_of(net):
    return {k: v.tobytes() for k, v in state_dict(net).items()}


@pytest.fixture(scope="module")
def trained():
    """Steps 1-4 on a small complementary task, keeping every intermediate."""
    cfg = DistillationConfig(**FAST)
    ds, sp, _ = prepare(synthetic(), cfg, 0.5, 0.1)
    specs = resolve_specs(ds)
    s1, s2, m1, m2 = step1_train_individual(ds, sp, specs, cfg)
    two, m_two = step2_train_two_stream(ds, sp, s1, s2, cfg)
    teacher_bytes = bytes_of(two.stream2)
    hall, m_hall, teacher = step3_train_hallucination(ds, sp, two, 2, cfg)
    hall_bytes = bytes_of(hall)
    final, m_final = step4_finetune_hallucinated(ds, sp, two, hall, 2, cfg)
    return dict(cfg=cfg, ds=ds, split=sp, s1=s1, s2=s2, m1=m1, m2=m2, two=two, m_two=m_two,
                hall=hall, m_hall=m_hall, teacher=teacher, final=final, m_final=m_final,
                teacher_bytes=teacher_bytes, hall_bytes=hall_bytes)


# --- config --------------------------------------------------------------------------------

def test_default_learning_rates_and_epochs():
    cfg = DistillationConfig()
    assert (cfg.alpha, cfg.lam, cfg.temperature) == (0.5, 0.5, 10.0)
    assert (cfg.lr_individual, cfg.lr_two_stream, cfg.lr_hall) == (3e-4, 1.5e-4, 3e-4)
    assert (cfg.epochs_individual, cfg.epochs_two_stream, cfg.epochs_hall, cfg.epochs_finetune) == (100, 200, 100, 100)
    hs = DistillationConfig.hyperspectral()
    assert (hs.lr_individual, hs.lr_two_stream, hs.lr_hall) == (6e-4, 3e-4, 6e-4)


@pytest.mark.parametrize("field,value", [
    ("epochs_individual", 0), ("alpha", 1.5), ("lam", -0.1), ("temperature", 0.0), ("gamma", -1.0),
    ("optimizer", "rmsprop"), ("hard_label_source", "oracle"), ("batch_size", 0), ("finetune_mode", "x"),
])
def test_config_rejects_out_of_range(field, value):
    with pytest.raises(ConfigError, match=field):
        DistillationConfig(**{field: value})


def test_config_dict_round_trip():
    cfg = DistillationConfig(alpha=0.25, seed=9)
    assert DistillationConfig.from_dict(cfg.to_dict()) == cfg
    assert DistillationConfig.from_dict({"lambda": 0.2}).lam == 0.2
    with pytest.raises(ConfigError, match="bogus"):
        DistillationConfig.from_dict({"bogus": 1})


# --- evaluate ------------------------------------------------------------------------------

class Fixed:
    """Stand-in network emitting preset logits for modality 1."""

    modalities = (1,)
    num_classes = 3

    def __init__(self, fn):
        self.fn = fn

    def __call__(self, x):
        from hallucinet.tensor import Tensor
        return Tensor(self.fn(x))


def test_evaluate_perfect_and_constant_classifiers():
    labels = np.repeat(np.arange(3), 10)
    ds = MultimodalDataset(np.eye(3, dtype=np.float32)[labels], None, labels, 3)
    perfect = evaluate(Fixed(lambda x: x * 5), ds)
    assert perfect.overall_accuracy == 100.0
    assert set(perfect.class_accuracy.values()) == {100.0}
    constant = evaluate(Fixed(lambda x: np.tile([0.0, 1.0, 0.0], (len(x), 1))), ds)
    assert constant.overall_accuracy == pytest.approx(100.0 / 3)


def test_metrics_match_brute_force_recount(rng):
    pred = rng.integers(0, 4, 500)
    labels = rng.integers(0, 4, 500)
    m = metrics_from_predictions(pred, labels)
    hits = sum(1 for p, y in zip(pred, labels) if p == y)
    assert m.overall_accuracy == pytest.approx(100.0 * hits / 500)
    for c in range(4):
        idx = [i for i in range(500) if labels[i] == c]
        assert m.class_total[c] == len(idx)
        assert m.class_correct[c] == sum(1 for i in idx if pred[i] == c)
    assert sum(m.class_correct.values()) == hits


def test_evaluate_empty_split_and_purity(trained):
    ds, sp = trained["ds"], trained["split"]
    with pytest.raises(EmptySplitError):
        evaluate(trained["two"], ds, np.array([], dtype=int))
    before = bytes_of(trained["two"])
    a = evaluate(trained["two"], ds, sp.test)
    b = evaluate(trained["two"], ds, sp.test)
    assert a == b and bytes_of(trained["two"]) == before


# --- steps --------------------------------------------------------------------------------

def test_step1_separable_task_exceeds_95_within_50_epochs():
    cfg = DistillationConfig(epochs_individual=50, lr_individual=3e-3, batch_size=32)
    ds, sp, _ = prepare(synthetic(leak=1.0, seed=4), cfg, 0.5, 0.1)
    _, _, m1, m2 = step1_train_individual(ds, sp, resolve_specs(ds), cfg)
    assert m1.overall_accuracy > 95 and m2.overall_accuracy > 95


def test_step1_is_deterministic():
    cfg = DistillationConfig(**{**FAST, "epochs_individual": 3})
    ds, sp, _ = prepare(synthetic(), cfg, 0.5, 0.1)
    runs = [step1_train_individual(ds, sp, resolve_specs(ds), cfg) for _ in range(2)]
    assert runs[0][2] == runs[1][2] and runs[0][3] == runs[1][3]
    assert bytes_of(runs[0][0]) == bytes_of(runs[1][0])


def test_step1_requires_both_modalities(trained):
    with pytest.raises(ModalityError):
        step1_train_individual(trained["ds"].drop_modality(2), trained["split"], resolve_specs(trained["ds"]),
                               trained["cfg"])


def test_empty_split_rejected(trained):
    sp = trained["split"]
    empty = type(sp)(sp.train, np.array([], dtype=int), sp.test)
    with pytest.raises(EmptySplitError):
        step1_train_individual(trained["ds"], empty, resolve_specs(trained["ds"]), trained["cfg"])


def test_two_stream_beats_each_stream(trained):
    assert trained["m_two"].overall_accuracy > trained["m1"].overall_accuracy
    assert trained["m_two"].overall_accuracy > trained["m2"].overall_accuracy


def test_two_stream_warm_starts_from_step1(trained, rng):
    cfg = trained["cfg"].replace(epochs_two_stream=1, lr_two_stream=1e-12)
    two, _ = step2_train_two_stream(trained["ds"], trained["split"], trained["s1"], trained["s2"], cfg)
    for name, value in state_dict(trained["s1"]).items():
        np.testing.assert_allclose(state_dict(two.stream1)[name], value, atol=1e-6)


def test_two_stream_rejects_mismatched_streams(trained, rng):
    wrong = build_stream(hs_stream_spec(4), (9,), 4, rng, 1)
    with pytest.raises(ValueError, match="do not match"):
        step2_train_two_stream(trained["ds"], trained["split"], wrong, trained["s2"], trained["cfg"])


def test_huge_gamma_collapses_fusion(trained):
    cfg = trained["cfg"].replace(gamma=1e6, epochs_two_stream=40, lr_two_stream=5e-2)
    _, m = step2_train_two_stream(trained["ds"], trained["split"], trained["s1"], trained["s2"], cfg)
    # validation objective = CE + gamma * sum(w^2). It can only approach ln(C) from
    # above when w is ~0 and the fused class probabilities are uniform (chance level).
    final = m.history[-1]["val_loss"]
    assert m.history[0]["val_loss"] > 1e5
    assert abs(final - np.log(4)) < 0.01


def test_warm_start_is_non_inferior():
    """Epochs needed to reach the best step-1 validation accuracy, paired over 5 seeds."""
    needed = {True: [], False: []}
    for seed in range(5):
        cfg = DistillationConfig(**{**FAST, "seed": seed, "epochs_two_stream": 10})
        ds, sp, _ = prepare(synthetic(seed=seed), cfg, 0.5, 0.1)
        s1, s2, _, _ = step1_train_individual(ds, sp, resolve_specs(ds), cfg)
        target = max(evaluate(s, ds, sp.validation).overall_accuracy for s in (s1, s2))
        for warm in (True, False):
            _, m = step2_train_two_stream(ds, sp, s1, s2, cfg, warm_start=warm)
            reached = [h["epoch"] for h in m.history if h["val_acc"] >= target]
            needed[warm].append(reached[0] if reached else cfg.epochs_two_stream + 1)
    assert np.mean(needed[True]) <= np.mean(needed[False])


def test_teacher_frozen_and_untouched(trained):
    assert bytes_of(trained["two"].stream2) == trained["teacher_bytes"]
    assert bytes_of(trained["teacher"]) == trained["teacher_bytes"]
    assert all(p.frozen for p in trained["teacher"].parameters())


def test_hall_net_clones_available_stream_spec(trained):
    hall, two = trained["hall"], trained["two"]
    assert hall.specs == two.stream1.specs
    assert hall.modality == 1
    assert bytes_of(hall) != bytes_of(two.stream1)


def test_invalid_missing_modality(trained):
    with pytest.raises(ModalityError):
        step3_train_hallucination(trained["ds"], trained["split"], trained["two"], 3, trained["cfg"])


def test_step4_freezes_hall_net(trained):
    final = trained["final"]
    assert bytes_of(final.hall) == trained["hall_bytes"]
    assert all(p.frozen for p in final.hall.parameters())
    assert final.modalities == (1,)


def test_step4_consumes_only_available_modality(trained):
    ds, sp, final = trained["ds"], trained["split"], trained["final"]
    only1 = ds.drop_modality(2)
    assert evaluate(final, only1, sp.test) == evaluate(final, ds, sp.test)
    with pytest.raises(ModalityError):
        evaluate(final, ds.drop_modality(1), sp.test)
    with pytest.raises(ModalityError):
        evaluate(final, ds, sp.test, needs={1, 2})
    with pytest.raises(ModalityError):
        evaluate(trained["two"], only1, sp.test)


def test_step4_modality_mismatch(trained):
    with pytest.raises(ModalityError):
        step4_finetune_hallucinated(trained["ds"], trained["split"], trained["two"], trained["hall"], 1,
                                    trained["cfg"])


def test_fusion_only_mode_keeps_available_stream(trained):
    cfg = trained["cfg"].replace(finetune_mode="fusion_only", epochs_finetune=3)
    final, _ = step4_finetune_hallucinated(trained["ds"], trained["split"], trained["two"], trained["hall"], 2, cfg)
    assert bytes_of(final.available) == bytes_of(trained["two"].stream1)


def test_snapshot_is_best_validation(trained):
    ds, sp = trained["ds"], trained["split"]
    for net_key, m_key in (("s1", "m1"), ("two", "m_two"), ("hall", "m_hall"), ("final", "m_final")):
        history = trained[m_key].history
        val = evaluate(trained[net_key], ds, sp.validation).overall_accuracy
        assert val == pytest.approx(max(h["val_acc"] for h in history))
        assert val >= history[-1]["val_acc"]


def test_ground_truth_hard_labels_switch(trained):
    cfg = trained["cfg"].replace(hard_label_source="ground_truth", epochs_hall=2)
    hall, m, _ = step3_train_hallucination(trained["ds"], trained["split"], trained["two"], 2, cfg)
    assert len(m.history) == 2


# --- full pipeline --------------------------------------------------------------------------

def test_full_pipeline_artifacts_and_determinism(tmp_path):
    cfg = DistillationConfig(**{**FAST, "epochs_individual": 3, "epochs_two_stream": 3, "epochs_hall": 3,
                                "epochs_finetune": 3})
    ds = synthetic(n_per_class=50)
    a = run_full_pipeline(ds, cfg, 2, out_dir=tmp_path / "a", val_fraction=0.1)
    run_full_pipeline(ds, cfg, 2, out_dir=tmp_path / "b", val_fraction=0.1)
    assert set(a.metrics) == set(NETWORKS) == set(a.networks)
    for name in NETWORKS:
        assert (tmp_path / "a" / f"{name}.hnck").read_bytes() == (tmp_path / "b" / f"{name}.hnck").read_bytes()
    summary = (tmp_path / "a" / "summary.json").read_bytes()
    assert summary == (tmp_path / "b" / "summary.json").read_bytes()
    parsed = json.loads(summary)
    assert parsed["checkpoints"]["hall_net"] == "hall_net.hnck"
    assert set(parsed["metrics"]) == set(NETWORKS)
    state = checkpoint.load(tmp_path / "a" / "hallucinated_two_stream.hnck")
    assert any(k.startswith("hall.") for k in state)
    assert (tmp_path / "a" / "metrics.csv").read_text().splitlines()[0] == "network,class,accuracy"


def test_full_pipeline_missing_modality_one(tmp_path):
    cfg = DistillationConfig(**{**FAST, "epochs_individual": 2, "epochs_two_stream": 2, "epochs_hall": 2,
                                "epochs_finetune": 2})
    art = run_full_pipeline(synthetic(n_per_class=50), cfg, 1, val_fraction=0.1)
    assert art.networks["hall_net"].modality == 2
    assert art.networks["hallucinated_two_stream"].modalities == (2,)


def test_metrics_csv_layout(trained):
    text = metrics_csv({"two_stream": trained["m_two"]})
    lines = text.splitlines()
    assert lines[0] == "network,class,accuracy"
    assert lines[1].startswith("two_stream,overall,")
    assert len(lines) == 2 + 4

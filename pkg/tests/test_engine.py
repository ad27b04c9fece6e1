import dataclasses

import numpy as np
import pytest

from cometsim.config import ClassSplit, DataConfig, DomainTransform, PretrainConfig, ScenarioConfig
from cometsim.engine import (
    CometAdapter,
    adapt_stream,
    get_source_model,
    infer,
    load_source_model,
    pretrain_source,
    run_experiment,
    save_source_model,
)
from cometsim.model import init_backbone
from cometsim.pseudo import normalized_entropy
from cometsim.stream import Dataset, generate_source_dataset, generate_target_stream


def _identity_params():
    eye = np.eye(2)
    return {"g.w1": eye, "g.b1": np.zeros(2), "h.w": eye, "h.b": np.zeros(2)}


def test_infer_uniform_rejected_and_confident_accepted():
    x = np.array([[1.0, 1.0], [30.0, 0.0]])
    preds = infer(_identity_params(), x, 0.5)
    assert preds.labels.tolist() == [2, 0]
    assert preds.entropy[0] == 1.0


def test_infer_entropy_equal_to_delta_is_known():
    x = np.array([[2.0, 0.5]])
    z = np.exp(x[0] - x.max())
    delta = float(normalized_entropy(z / z.sum()))
    assert infer(_identity_params(), x, delta).labels.tolist() == [0]
    assert infer(_identity_params(), x, np.nextafter(delta, 0)).labels.tolist() == [2]


def test_pretrain_two_dimensional_gaussians():
    sc = ScenarioConfig(
        split=ClassSplit(6, 0, 0),
        data=DataConfig(input_dim=2, separation=6.0, source_per_class=150),
        pretrain=PretrainConfig(epochs=40, label_smoothing=0.0),
    )
    source = pretrain_source(generate_source_dataset(sc, 0), sc, 0)
    assert source.val_accuracy >= 0.95
    assert source.prototypes.mode == "P" and source.prototypes.present().all()


def test_pretrain_zero_epochs_is_initialization(small_scenario):
    sc = dataclasses.replace(small_scenario, pretrain=PretrainConfig(epochs=0))
    source = pretrain_source(generate_source_dataset(sc, 0), sc, 0)
    from cometsim.engine import _PRETRAIN, network_config

    init = init_backbone(network_config(sc), np.random.default_rng([0, _PRETRAIN]))
    for k, v in init.items():
        np.testing.assert_array_equal(source.model.params[k], v)
    assert source.epochs_run == 0


def test_pretrain_deterministic(small_scenario):
    data = generate_source_dataset(small_scenario, 1)
    a = pretrain_source(data, small_scenario, 1)
    b = pretrain_source(data, small_scenario, 1)
    for k in a.model.params:
        np.testing.assert_array_equal(a.model.params[k], b.model.params[k])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_pretrain_divergence_reported(small_scenario):
    from cometsim.engine import PretrainingDiverged

    sc = dataclasses.replace(small_scenario, pretrain=PretrainConfig(epochs=5, learning_rate=1e6))
    data = generate_source_dataset(sc, 0)
    bad = Dataset(data.x * 1e200, data.y)
    with pytest.raises(PretrainingDiverged, match="learning_rate"):
        pretrain_source(bad, sc, 0)


def test_source_checkpoint_round_trip(tmp_path, small_scenario):
    source = get_source_model(small_scenario, 0)
    path = tmp_path / "src.npz"
    save_source_model(path, source, small_scenario, 0)
    loaded = load_source_model(path, small_scenario, 0)
    assert loaded.val_accuracy == source.val_accuracy
    np.testing.assert_array_equal(loaded.prototypes.sums, source.prototypes.sums)
    with pytest.raises(ValueError, match="different"):
        load_source_model(path, small_scenario, 1)


def test_run_is_deterministic(small_scenario):
    a = run_experiment(small_scenario, "comet-p", 0)
    b = run_experiment(small_scenario, "comet-p", 0)
    assert a.summary == b.summary and a.records == b.records


def test_one_record_per_batch(small_scenario):
    result = run_experiment(small_scenario, "comet-f", 0)
    assert [r["batch"] for r in result.records] == list(range(small_scenario.num_batches))
    assert result.summary["metric"] == "h_score"
    for r in result.records:
        assert sum(r["pseudo"].values()) == r["size"]


def test_zero_lambda_all_uncertain_equals_source_only(small_scenario):
    sc = small_scenario.with_hyper(lam=0.0, delta_l=0.0, delta_u=1.0)
    adapted = run_experiment(sc, "comet-p", 0)
    baseline = run_experiment(sc, "source-only", 0)
    np.testing.assert_array_equal(adapted.predictions, baseline.predictions)
    assert not any(r["updated"] for r in adapted.records)


def test_alpha_one_keeps_teacher_and_pseudo_labels_fixed(small_scenario):
    sc = small_scenario.with_hyper(alpha=1.0)
    source = get_source_model(sc, 0)
    adapter = CometAdapter(source, sc.hyper, "P", 0, sc.data.effective_augment_sigma)
    before = {k: v.copy() for k, v in adapter.pair.teacher.params.items()}
    from cometsim.pseudo import PseudoThresholds, assign_pseudo_labels

    for batch in generate_target_stream(sc, 0):
        expected = assign_pseudo_labels(source.model.probs(batch.x), PseudoThresholds(sc.hyper.delta_l, sc.hyper.delta_u))
        result = adapter.step(batch)
        np.testing.assert_array_equal(result.pseudo_labels, expected)
    for k, v in before.items():
        np.testing.assert_array_equal(adapter.pair.teacher.params[k], v)
    assert adapter.pair.ema_steps == sc.num_batches


def test_exactly_one_optimizer_and_ema_step_per_batch(small_scenario):
    source = get_source_model(small_scenario, 0)
    adapter = CometAdapter(source, small_scenario.hyper, "F", 0, 0.1)
    stream = generate_target_stream(small_scenario, 0)
    steps = []
    original = adapter.optimizer.step

    def counting(params, grads):
        steps.append(1)
        return original(params, grads)

    adapter.optimizer.step = counting
    records = adapt_stream(adapter, stream, small_scenario, 0, "comet-f", source).records
    assert len(steps) == sum(r["updated"] for r in records)
    assert adapter.pair.ema_steps == len(records)


@pytest.mark.parametrize("variant", ["comet-p", "comet-f"])
def test_online_causality_replay(small_scenario, variant):
    full = run_experiment(small_scenario, variant, 2).records
    source = get_source_model(small_scenario, 2)
    for t in (0, 3, len(full) - 1):
        stream = generate_target_stream(small_scenario, 2).truncated(t + 1)
        mode = "P" if variant == "comet-p" else "F"
        adapter = CometAdapter(source, small_scenario.hyper, mode, 2, small_scenario.data.effective_augment_sigma)
        replay = adapt_stream(adapter, stream, small_scenario, 2, variant, source).records
        assert len(replay) == t + 1
        assert replay[t]["predictions"] == full[t]["predictions"]


def test_pseudo_label_precision_beats_argmax():
    from cometsim.config import load_scenario

    summary = run_experiment(load_scenario("ref_opda"), "comet-p", 0).summary
    assert summary["pseudo_known_precision"] > summary["teacher_argmax_accuracy"]


def test_pda_reports_accuracy(small_pda):
    summary = run_experiment(small_pda, "comet-p", 0).summary
    assert summary["metric"] == "accuracy" and summary["h_score"] is None
    assert summary["value"] == summary["accuracy"]


def test_identity_shift_pda_baseline_close_to_validation(small_pda):
    sc = dataclasses.replace(small_pda, domain=DomainTransform(0, 0, 1, 0))
    result = run_experiment(sc, "source-only", 0)
    rejected = result.summary["counts"]["predicted_unknown"] / result.summary["counts"]["samples"]
    assert result.summary["accuracy"] == pytest.approx(result.summary["source_val_accuracy"] - rejected, abs=0.06)


def test_noise_far_from_clusters_is_rejected(small_scenario):
    source = get_source_model(small_scenario, 0)
    rng = np.random.default_rng(0)
    # Mid-way between every pair of clusters with source-like spread.
    x = rng.normal(size=(500, small_scenario.data.input_dim)) * 0.3
    preds = infer(source.model.params, x, small_scenario.hyper.delta)
    assert np.mean(preds.labels == small_scenario.split.num_source) > 0.5


def test_unknown_variant(small_scenario):
    with pytest.raises(ValueError, match="variant"):
        run_experiment(small_scenario, "comet-x", 0)


@pytest.mark.slow
def test_no_catastrophic_negative_transfer_without_shift():
    from cometsim.config import load_scenario

    sc = dataclasses.replace(load_scenario("ref_pda"), domain=DomainTransform(0, 0, 1, 0))
    for variant in ("comet-p", "comet-f"):
        base = np.mean([run_experiment(sc, "source-only", s).summary["accuracy"] for s in range(5)])
        adapted = np.mean([run_experiment(sc, variant, s).summary["accuracy"] for s in range(5)])
        assert adapted >= base - 0.02, (variant, adapted, base)

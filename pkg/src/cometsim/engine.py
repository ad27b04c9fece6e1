"""Source pre-training, the online adaptation loop, inference and the source-only baseline."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import numerics as nx
from .config import HyperParams, ScenarioConfig
from .losses import build_layout, contrastive_loss, entropy_loss, total_loss
from .metrics import summarize
from .model import (
    ComposedModel,
    load_checkpoint,
    save_checkpoint,
    NetworkConfig,
    StudentTeacherPair,
    ema_update,
    forward_features,
    forward_logits,
    forward_probs,
    init_backbone,
    init_projection,
)
from .prototypes import PrototypeBank, bank_arrays, bank_from_arrays, compute_source_prototypes, update_running_prototypes
from .pseudo import PseudoThresholds, assign_pseudo_labels, normalized_entropy, tag_counts
from .stream import Dataset, TargetBatch, TargetStream, augment, generate_source_dataset, generate_target_stream

log = logging.getLogger(__name__)

VARIANTS = ("comet-p", "comet-f", "source-only")

# Sub-stream tags for seeded generators.
_PRETRAIN, _PROJECTION, _AUGMENT = 21, 22, 23


class PretrainingDiverged(RuntimeError):
    pass


@dataclass
class Predictions:
    labels: np.ndarray
    entropy: np.ndarray
    max_prob: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def infer(params, x: np.ndarray, delta: float) -> Predictions:
    """argmax of the classifier output unless its normalized entropy exceeds ``delta``."""
    probs = forward_probs(params, forward_features(params, x)).data
    ent = np.atleast_1d(normalized_entropy(probs))
    labels = np.argmax(probs, axis=1)
    labels = np.where(ent > delta, probs.shape[1], labels)
    return Predictions(labels, ent, probs.max(axis=1))


def network_config(scenario: ScenarioConfig) -> NetworkConfig:
    net = scenario.network
    return NetworkConfig(
        input_dim=scenario.data.input_dim,
        num_known_classes=scenario.split.num_source,
        feature_dim=net.feature_dim,
        projection_dim=net.projection_dim,
        g_hidden=net.g_hidden,
        proj_hidden=net.proj_hidden,
    )


@dataclass
class SourceModel:
    model: ComposedModel
    prototypes: PrototypeBank
    val_accuracy: float
    epochs_run: int
    history: list[dict[str, float]] = field(default_factory=list)


def _cross_entropy(params, x, y, smoothing: float = 0.0) -> nx.Tensor:
    logp = nx.log_softmax(forward_logits(params, forward_features(params, x)))
    k = logp.shape[1]
    target = np.full(logp.shape, smoothing / k)
    target[np.arange(len(y)), y] += 1.0 - smoothing
    return nx.scale(nx.sum(nx.mul(logp, target)), -1.0 / len(y))


def pretrain_source(source: Dataset, scenario: ScenarioConfig, seed: int) -> SourceModel:
    """Closed-set cross-entropy training with early stopping on validation accuracy.

    Source prototypes are computed from the best model on the full source set.
    """
    cfg = scenario.pretrain
    config = network_config(scenario)
    rng = np.random.default_rng([seed, _PRETRAIN])
    params = init_backbone(config, rng)

    n_val = int(round(len(source) * scenario.data.val_fraction))
    order = rng.permutation(len(source))
    val, train = source.subset(order[:n_val]), source.subset(order[n_val:])
    eval_set = val if n_val else train

    def val_acc(p) -> float:
        logits = forward_logits(p, forward_features(p, eval_set.x)).data
        return float(np.mean(np.argmax(logits, axis=1) == eval_set.y))

    opt = nx.SgdMomentum(cfg.learning_rate, cfg.momentum)
    best, best_acc, since_best = {k: v.copy() for k, v in params.items()}, val_acc(params), 0
    history = []
    epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(len(train))
        losses = []
        for start in range(0, len(train), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            leaves = nx.leaves(params)
            loss = _cross_entropy(leaves, train.x[idx], train.y[idx], cfg.label_smoothing)
            if not np.isfinite(loss.data):
                raise PretrainingDiverged(
                    f"non-finite loss at epoch {epoch}, step {start // cfg.batch_size}; "
                    f"learning_rate={cfg.learning_rate}, last finite losses={losses[-3:]}"
                )
            opt.step(params, nx.backward(loss, leaves))
            losses.append(float(loss.data))
        acc = val_acc(params)
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_accuracy": acc})
        if acc > best_acc:
            best, best_acc, since_best = {k: v.copy() for k, v in params.items()}, acc, 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    model = ComposedModel(config, best)
    bank = compute_source_prototypes(model.features(source.x), source.y, config.num_known_classes)
    log.debug("pretrained seed=%d epochs=%d val_acc=%.4f", seed, epoch, best_acc)
    return SourceModel(model, bank, best_acc, epoch, history)


_SOURCE_CACHE: dict[str, SourceModel] = {}


def source_key(scenario: ScenarioConfig, seed: int) -> str:
    """Canonical description of everything that determines the source model."""
    d = scenario.to_dict()
    return json.dumps({k: d[k] for k in ("split", "data", "network", "pretrain")} | {"seed": seed}, sort_keys=True)


def get_source_model(scenario: ScenarioConfig, seed: int) -> SourceModel:
    """Pre-train (memoized per process on the settings that affect the source model)."""
    key = source_key(scenario, seed)
    if key not in _SOURCE_CACHE:
        _SOURCE_CACHE[key] = pretrain_source(generate_source_dataset(scenario, seed), scenario, seed)
    return _SOURCE_CACHE[key]


def save_source_model(path, source: SourceModel, scenario: ScenarioConfig, seed: int) -> None:
    extra = bank_arrays(source.prototypes)
    extra["val_accuracy"] = np.array([source.val_accuracy])
    extra["epochs_run"] = np.array([source.epochs_run])
    extra["source_key"] = np.frombuffer(source_key(scenario, seed).encode(), dtype=np.uint8)
    save_checkpoint(path, source.model, extra)


def load_source_model(path, scenario: ScenarioConfig | None = None, seed: int | None = None) -> SourceModel:
    """Load a pre-trained source model; with ``scenario`` and ``seed``, refuse a mismatched one."""
    model, extra = load_checkpoint(path)
    if scenario is not None:
        stored = bytes(extra["source_key"]).decode()
        if stored != source_key(scenario, seed):
            raise ValueError(f"{path}: checkpoint was trained for a different scenario or seed")
    return SourceModel(model, bank_from_arrays(extra), float(extra["val_accuracy"][0]), int(extra["epochs_run"][0]))


def register_source_model(source: SourceModel, scenario: ScenarioConfig, seed: int) -> None:
    """Make ``get_source_model`` return ``source`` for this scenario and seed."""
    _SOURCE_CACHE[source_key(scenario, seed)] = source


@dataclass
class StepResult:
    predictions: Predictions
    pseudo_labels: np.ndarray
    loss_c: float
    loss_e: float
    loss: float
    updated: bool


class CometAdapter:
    """Online mean-teacher adaptation with contrastive and entropy losses.

    ``mode`` is ``"P"`` (frozen source prototypes) or ``"F"`` (running target
    prototypes). The projection head is freshly initialized from ``seed``.
    """

    def __init__(self, source: SourceModel, hp: HyperParams, mode: str, seed: int, augment_sigma: float):
        config = source.model.config
        params = {k: v.copy() for k, v in source.model.params.items() if not k.startswith("proj.")}
        params.update(init_projection(config, np.random.default_rng([seed, _PROJECTION])))
        self.pair = StudentTeacherPair.from_model(ComposedModel(config, params), hp.alpha)
        if mode == "P":
            self.bank = source.prototypes.copy()
        elif mode == "F":
            self.bank = PrototypeBank.empty(config.num_known_classes, config.feature_dim)
        else:
            raise ValueError(f"unknown prototype mode {mode!r}")
        self.mode = mode
        self.hp = hp
        self.thresholds = PseudoThresholds(hp.delta_l, hp.delta_u)
        self.optimizer = nx.SgdMomentum(hp.learning_rate, hp.sgd_momentum)
        self.seed = seed
        self.augment_sigma = augment_sigma
        self.steps = 0

    def step(self, batch: TargetBatch) -> StepResult:
        hp = self.hp
        student, teacher = self.pair.student, self.pair.teacher
        x = batch.x

        predictions = infer(student.params, x, hp.delta)

        teacher_feats = teacher.features(x)
        teacher_probs = forward_probs(teacher.params, teacher_feats).data
        pseudo = assign_pseudo_labels(teacher_probs, self.thresholds)

        if self.mode == "F":
            feats = teacher_feats if hp.running_prototype_source == "teacher" else student.features(x)
            update_running_prototypes(self.bank, feats, pseudo)

        leaves = nx.leaves(student.params)
        batch_feats = forward_features(leaves, x)
        l_c = nx.Tensor(0.0)
        if hp.use_contrastive:
            rng = np.random.default_rng([self.seed, _AUGMENT, batch.index])
            x_aug = augment(x, rng, self.augment_sigma)
            layout = build_layout(leaves, x, x_aug, pseudo, self.bank, hp.tau, batch_feats)
            l_c = contrastive_loss(layout)
        l_e = nx.Tensor(0.0)
        if hp.use_entropy:
            l_e = entropy_loss(forward_probs(leaves, batch_feats), pseudo)
        loss = total_loss(l_c, l_e, hp.lam, hp.use_contrastive, hp.use_entropy)

        updated = bool(loss.requires_grad)
        if updated:
            self.optimizer.step(student.params, nx.backward(loss, leaves))
        ema_update(self.pair)
        self.steps += 1
        return StepResult(predictions, pseudo, float(l_c.data), float(l_e.data), float(loss.data), updated)


def _batch_record(index: int, preds: Predictions, truth: np.ndarray, unknown: int) -> dict[str, Any]:
    return {
        "batch": index,
        "size": int(len(preds)),
        "predictions": preds.labels.astype(int).tolist(),
        "labels": truth.astype(int).tolist(),
        "correct": int((preds.labels == truth).sum()),
        "predicted_unknown": int((preds.labels == unknown).sum()),
    }


@dataclass
class RunResult:
    variant: str
    seed: int
    records: list[dict[str, Any]]
    summary: dict[str, Any]
    predictions: np.ndarray
    labels: np.ndarray


def _finish(variant, seed, scenario, source, records, preds, labels, extra) -> RunResult:
    unknown = scenario.split.num_source
    metrics = summarize(preds, labels, unknown)
    name, value = metrics.headline(scenario.split.kind)
    summary = {
        "scenario": scenario.name,
        "variant": variant,
        "seed": seed,
        "split_kind": scenario.split.kind,
        "metric": name,
        "value": value,
        "accuracy": metrics.accuracy_all,
        "accuracy_known": metrics.accuracy_known,
        "accuracy_unknown": metrics.accuracy_unknown,
        "h_score": metrics.h_score,
        "per_class_accuracy": metrics.per_class_accuracy,
        "counts": metrics.counts,
        "batches": len(records),
        "source_val_accuracy": source.val_accuracy,
        "source_epochs": source.epochs_run,
        "hyper": scenario.to_dict()["hyper"],
        **extra,
    }
    return RunResult(variant, seed, records, summary, preds, labels)


def source_only_baseline(source: SourceModel, stream: TargetStream, scenario: ScenarioConfig, seed: int) -> RunResult:
    params = source.model.params
    unknown = stream.num_known
    records, all_preds, all_labels = [], [], []
    for batch in stream:
        preds = infer(params, batch.x, scenario.hyper.delta)
        truth = stream.ground_truth.labels(batch.index)
        records.append(_batch_record(batch.index, preds, truth, unknown))
        all_preds.append(preds.labels)
        all_labels.append(truth)
    return _finish("source-only", seed, scenario, source, records, np.concatenate(all_preds), np.concatenate(all_labels), {})


def adapt_stream(adapter: CometAdapter, stream: TargetStream, scenario: ScenarioConfig, seed: int, variant: str, source: SourceModel) -> RunResult:
    unknown = stream.num_known
    records, all_preds, all_labels = [], [], []
    tagged_known = tagged_correct = argmax_correct = seen = 0
    for batch in stream:
        teacher_argmax = np.argmax(adapter.pair.teacher.probs(batch.x), axis=1)
        result = adapter.step(batch)
        truth = stream.ground_truth.labels(batch.index)
        rec = _batch_record(batch.index, result.predictions, truth, unknown)
        is_known_tag = (result.pseudo_labels >= 0) & (result.pseudo_labels < unknown)
        rec.update(
            pseudo=tag_counts(result.pseudo_labels, unknown),
            pseudo_known_correct=int((result.pseudo_labels[is_known_tag] == truth[is_known_tag]).sum()),
            teacher_argmax_correct=int((teacher_argmax == truth).sum()),
            loss_c=result.loss_c,
            loss_e=result.loss_e,
            loss=result.loss,
            updated=result.updated,
        )
        tagged_known += int(is_known_tag.sum())
        tagged_correct += rec["pseudo_known_correct"]
        argmax_correct += rec["teacher_argmax_correct"]
        seen += len(truth)
        records.append(rec)
        all_preds.append(result.predictions.labels)
        all_labels.append(truth)
    extra = {
        "pseudo_known_precision": tagged_correct / tagged_known if tagged_known else None,
        "teacher_argmax_accuracy": argmax_correct / seen if seen else None,
    }
    return _finish(variant, seed, scenario, source, records, np.concatenate(all_preds), np.concatenate(all_labels), extra)


def run_experiment(scenario: ScenarioConfig, variant: str, seed: int, source: SourceModel | None = None) -> RunResult:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if source is None:
        source = get_source_model(scenario, seed)
    stream = generate_target_stream(scenario, seed)
    if variant == "source-only":
        return source_only_baseline(source, stream, scenario, seed)
    mode = "P" if variant == "comet-p" else "F"
    adapter = CometAdapter(source, scenario.hyper, mode, seed, scenario.data.effective_augment_sigma)
    return adapt_stream(adapter, stream, scenario, seed, variant, source)

"""Training loop with early stopping, fine-tuning regimes and k-fold cross-validation."""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import Checkpoint
from .errors import DataError, NumericError
from .graph import Vocabulary
from .ingest import DatasetManifest, class_counts, filter_manifest, stratified_kfold
from .metrics import build_report, confusion_matrix, per_class_recall
from .model import (
    ForwardPass,
    GraphEncoder,
    ModelConfig,
    add_head_parameters,
    init_parameters,
    loss_and_gradients,
)
from .numerics import AdamState, ParameterStore, adam_step, cross_entropy_with_logits, make_rng

log = logging.getLogger(__name__)

FINETUNE_MODES = ("scratch", "head_only", "full")
_MODE_ALIASES = {"head": "head_only", "network": "full"}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 3e-5
    batch_size: int = 8
    max_epochs: int = 120
    patience: int = 10
    seed: int = 0
    finetune_mode: str = "scratch"
    class_weighting: bool = False
    confidence_tau: float = 0.0
    decoupled_weight_decay: bool = False
    eval_batch_size: int = 64

    def __post_init__(self):
        mode = _MODE_ALIASES.get(self.finetune_mode, self.finetune_mode)
        object.__setattr__(self, "finetune_mode", mode)
        if mode not in FINETUNE_MODES:
            raise DataError(f"unknown finetune mode {self.finetune_mode!r}")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise DataError("learning_rate must be positive and weight_decay non-negative")
        if self.batch_size < 1 or self.max_epochs < 1 or self.eval_batch_size < 1:
            raise DataError("batch sizes and max_epochs must be positive")
        if not 0 <= self.patience <= self.max_epochs:
            raise DataError("patience must lie in [0, max_epochs]")
        if not 0.0 <= self.confidence_tau <= 1.0:
            raise DataError("confidence_tau must lie in [0, 1]")

    @classmethod
    def places8(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    @classmethod
    def rcpd(cls, **overrides) -> "TrainConfig":
        kw = dict(learning_rate=3.8e-4, weight_decay=1.4e-5, max_epochs=20, patience=0)
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown training config field(s): {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read training config {path}: {exc}") from exc


def apply_finetune_mask(params: ParameterStore, mode: str) -> ParameterStore:
    """Set trainable flags: everything for scratch/full, only ``head.*`` for head_only."""
    mode = _MODE_ALIASES.get(mode, mode)
    if mode not in FINETUNE_MODES:
        raise DataError(f"unknown finetune mode {mode!r}")
    for name in params:
        params.set_trainable(name, mode != "head_only" or name.startswith("head."))
    return params


class EarlyStopping:
    """Tracks the best validation loss; only a strict decrease counts as improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = float("inf")
        self.best_epoch: int | None = None
        self.since_improvement = 0
        self.snapshot: dict | None = None

    def update(self, epoch: int, val_loss: float, params: ParameterStore) -> bool:
        """Record an epoch; returns True when training should stop."""
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.since_improvement = 0
            self.snapshot = params.snapshot()
        else:
            self.since_improvement += 1
        return self.patience > 0 and self.since_improvement >= self.patience


def class_weights_for(graphs, num_classes: int) -> np.ndarray:
    """Inverse-frequency weights normalized to mean 1 over the classes present."""
    counts = class_counts(graphs, num_classes).astype(np.float64)
    w = np.zeros(num_classes)
    present = counts > 0
    w[present] = counts[present].sum() / (present.sum() * counts[present])
    return w


def predict_logits(graphs, params: ParameterStore, config: ModelConfig, batch_size: int = 64, encoder=None,
                   with_records: bool = False):
    """Eval-mode logits for ``graphs`` (stacked), optionally with attention records."""
    enc = encoder or GraphEncoder(config.self_loop_index)
    logits, records = [], []
    for i in range(0, len(graphs), batch_size):
        fp = ForwardPass(enc.collate(graphs[i : i + batch_size]), params, config, train=False)
        logits.append(fp.logits)
        if with_records:
            records.extend(fp.records())
    out = np.concatenate(logits) if logits else np.zeros((0, config.num_classes))
    return (out, records) if with_records else out


def evaluate_loss(graphs, params, config, batch_size=64, encoder=None, class_weights=None) -> tuple[float, np.ndarray]:
    """Mean eval-mode cross-entropy over ``graphs`` and the stacked logits."""
    logits = predict_logits(graphs, params, config, batch_size, encoder)
    labels = np.array([g.label for g in graphs], dtype=np.intp)
    loss, _ = cross_entropy_with_logits(logits, labels, class_weights)
    return loss, logits


def _balanced_accuracy_quiet(labels, preds, num_classes) -> float:
    rec = per_class_recall(confusion_matrix(labels, preds, num_classes))
    return float(np.nanmean(rec)) if not np.all(np.isnan(rec)) else float("nan")


def _initial_parameters(initial: Checkpoint, model_config: ModelConfig, class_names, seed: int) -> ParameterStore:
    base = initial.model_config
    if replace(base, num_classes=model_config.num_classes) != model_config:
        raise DataError("initial checkpoint's model config does not match the requested architecture")
    params = initial.params.copy()
    if list(initial.class_names) != list(class_names):
        # new label space: re-initialize the output layer only
        fresh = ParameterStore()
        add_head_parameters(fresh, model_config, make_rng(seed, "init", 1), only_output=True)
        rebuilt = ParameterStore()
        for name in params:
            src = fresh if name in fresh else params
            rebuilt.add(name, src[name])
        log.info("class set changed (%d -> %d classes); output layer re-initialized",
                 base.num_classes, model_config.num_classes)
        return rebuilt
    return params


def train(
    train_set: DatasetManifest,
    val_set: DatasetManifest,
    config: TrainConfig,
    initial: Checkpoint | None = None,
    *,
    model_config: ModelConfig | None = None,
    vocab: Vocabulary | None = None,
    val_loss_hook: Callable[[int, float], float] | None = None,
) -> Checkpoint:
    """Train with Adam and early stopping; returns the best-epoch checkpoint.

    ``val_loss_hook(epoch, val_loss)`` may replace the measured validation
    loss; it exists for exercising the stopping logic deterministically.
    Epochs are numbered from 1.
    """
    if not len(train_set) or not len(val_set):
        raise DataError("training and validation sets must be non-empty")
    class_names = list(train_set.class_set.names)
    num_classes = len(class_names)
    vocab = vocab or Vocabulary.vg150()
    if model_config is None:
        model_config = (
            replace(initial.model_config, num_classes=num_classes)
            if initial is not None
            else ModelConfig.places8(vocab, num_classes=num_classes)
        )
    if model_config.num_classes != num_classes:
        raise DataError(f"model has {model_config.num_classes} outputs but data has {num_classes} classes")
    if initial is not None:
        initial.check_vocabulary(vocab, override=False)

    if config.confidence_tau > 0:
        train_set, _ = filter_manifest(train_set, config.confidence_tau)
        val_set, _ = filter_manifest(val_set, config.confidence_tau)
    train_graphs = list(train_set.graphs)
    val_graphs = list(val_set.graphs)
    for g in train_graphs + val_graphs:
        if g.label is None:
            raise DataError(f"unlabeled graph {g.graph_id!r} in a training/validation set")

    if initial is None:
        params = init_parameters(model_config, config.seed)
    else:
        params = _initial_parameters(initial, model_config, class_names, config.seed)
    apply_finetune_mask(params, config.finetune_mode)

    weights = class_weights_for(train_graphs, num_classes) if config.class_weighting else None
    opt = AdamState(
        learning_rate=config.learning_rate,
        weight_decay=config.weight_decay,
        decoupled=config.decoupled_weight_decay,
    )
    shuffle_rng = make_rng(config.seed, "shuffle")
    dropout_rng = make_rng(config.seed, "dropout")
    enc = GraphEncoder(model_config.self_loop_index)
    val_labels = np.array([g.label for g in val_graphs])
    stopper = EarlyStopping(config.patience)
    history, timings = [], []

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(len(train_graphs))
        total = 0.0
        for bi, start in enumerate(range(0, len(order), config.batch_size)):
            batch = [train_graphs[j] for j in order[start : start + config.batch_size]]
            try:
                loss = loss_and_gradients(batch, params, model_config, rng=dropout_rng, train=True,
                                          class_weights=weights, encoder=enc)
                adam_step(params, opt)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {bi}: {exc}") from exc
            total += loss * len(batch)
        val_loss, val_logits = evaluate_loss(val_graphs, params, model_config, config.eval_batch_size, enc, weights)
        if val_loss_hook is not None:
            val_loss = float(val_loss_hook(epoch, val_loss))
        val_bacc = _balanced_accuracy_quiet(val_labels, val_logits.argmax(axis=1), num_classes)
        history.append({
            "epoch": epoch,
            "train_loss": total / len(train_graphs),
            "val_loss": val_loss,
            "val_balanced_accuracy": val_bacc,
        })
        timings.append(time.perf_counter() - t0)
        log.info("epoch %d  train %.4f  val %.4f  val bacc %.4f", epoch, total / len(train_graphs), val_loss, val_bacc)
        if stopper.update(epoch, val_loss, params):
            log.info("early stop at epoch %d (best epoch %d)", epoch, stopper.best_epoch)
            break

    if stopper.snapshot is not None:
        params.restore(stopper.snapshot)
    return Checkpoint(
        model_config=model_config,
        train_config=config.to_dict(),
        class_names=class_names,
        params=params,
        object_vocab_hash=vocab.object_hash(),
        relation_vocab_hash=vocab.relation_hash(),
        history=history,
        best_epoch=stopper.best_epoch,
        optimizer=opt.hyperparameters(),
        timings=timings,
    )


def evaluate(ckpt: Checkpoint, manifest: DatasetManifest, batch_size: int = 64, positive_class: int | None = None):
    """Metrics report of ``ckpt`` on a labeled manifest."""
    graphs = [g for g in manifest.graphs if g.label is not None]
    if not graphs:
        raise DataError("no labeled graphs to evaluate")
    logits = predict_logits(graphs, ckpt.params, ckpt.model_config, batch_size)
    return build_report(
        [g.label for g in graphs],
        logits.argmax(axis=1).tolist(),
        ckpt.class_names,
        subset_tags=[g.subset_tag for g in graphs],
        positive_class=positive_class,
    )


def _run_fold(args):
    manifest, plan, i, config, model_config, vocab, positive_class, initial = args
    train_part, held = plan.split(manifest, i)
    fold_cfg = replace(config, seed=config.seed + i)
    ckpt = train(train_part, held, fold_cfg, initial, model_config=model_config, vocab=vocab)
    report = evaluate(ckpt, held, fold_cfg.eval_batch_size, positive_class)
    return {
        "fold": i,
        "seed": fold_cfg.seed,
        "n_train": len(train_part),
        "n_eval": len(held),
        "best_epoch": ckpt.best_epoch,
        "epochs_run": len(ckpt.history),
        "balanced_accuracy": report.balanced_accuracy,
        "recall": report.binary_recall,
        "per_class_recall": report.to_dict()["per_class_recall"],
    }


def cross_validate(
    manifest: DatasetManifest,
    k: int,
    config: TrainConfig,
    *,
    model_config: ModelConfig | None = None,
    vocab: Vocabulary | None = None,
    positive_class: int | None = None,
    initial: Checkpoint | None = None,
    jobs: int = 1,
) -> dict:
    """Stratified k-fold: fold i is validation and evaluation set, the rest trains.

    Fold ``i`` trains with seed ``config.seed + i``. Results are ordered by
    fold index whatever ``jobs`` is.
    """
    plan = stratified_kfold(manifest, k, config.seed)
    vocab = vocab or Vocabulary.vg150()
    tasks = [(manifest, plan, i, config, model_config, vocab, positive_class, initial) for i in range(k)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            folds = list(pool.map(_run_fold, tasks))
    else:
        folds = [_run_fold(t) for t in tasks]
    summary = {"k": k, "seed": config.seed, "folds": folds}
    for key in ("balanced_accuracy", "recall"):
        vals = [f[key] for f in folds if f[key] is not None]
        if vals:
            summary[f"{key}_mean"] = float(np.mean(vals))
            summary[f"{key}_std"] = float(np.std(vals))
    return summary

"""
Training loop, evaluation metrics, embedding dumps and multi-seed sweeps.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.metrics import confusion_matrix, f1_score

import tensor_core as tc
from dataio import (
    Conversation,
    FeatureSpec,
    batch_iter,
    generate_synthetic,
    load_dataset,
    load_synthetic_config,
    split_dataset,
)
from losses import cross_entropy, scl_loss, total_loss, ucl_loss
from model import Model, build_model, save_checkpoint, scl_config
from run_config import ConfigError, RunConfig
from telemetry import get_tracer, set_attributes
from tensor_core import AdamState, NonFiniteError, Tensor, make_rng

logger = logging.getLogger(__name__)
tracer = get_tracer(__name__)

HISTORY_COLUMNS = ["epoch", "loss_ce", "loss_scl", "loss_ucl", "val_acc", "val_wf1"]
HISTORY_FILE = "history.csv"
CHECKPOINT_DIR = "checkpoint"
SWEEP_FILE = "sweep.csv"


class DivergenceError(RuntimeError):
    """Raised when a batch produces a non-finite loss."""

    def __init__(self, batch_id: str, message: str = ""):
        self.batch_id = batch_id
        super().__init__(f"Non-finite loss at batch {batch_id}" + (f": {message}" if message else ""))


@dataclass
class Metrics:
    accuracy: float
    weighted_f1: float
    per_class_f1: Dict[int, float]
    confusion: np.ndarray
    support: np.ndarray

    def to_dict(self, spec: Optional[FeatureSpec] = None) -> dict:
        def name(c):
            return spec.class_name(c) if spec else str(c)

        return {
            "accuracy": self.accuracy,
            "weighted_f1": self.weighted_f1,
            "per_class_f1": {name(c): f for c, f in self.per_class_f1.items()},
            "confusion": self.confusion.tolist(),
        }


def compute_metrics(labels: Sequence[int], predictions: Sequence[int], num_classes: int) -> Metrics:
    """
    Accuracy, per-class F1 (zero when undefined) and support-weighted F1.

    Classes with no true samples get weight zero in the weighted F1.
    """
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("Cannot compute metrics over an empty set")
    classes = list(range(num_classes))
    confusion = confusion_matrix(labels, predictions, labels=classes)
    per_class = f1_score(labels, predictions, labels=classes, average=None, zero_division=0)
    support = confusion.sum(axis=1)
    return Metrics(
        accuracy=float(np.trace(confusion) / confusion.sum()),
        weighted_f1=float(np.dot(support / support.sum(), per_class)),
        per_class_f1={c: float(per_class[c]) for c in classes},
        confusion=confusion,
        support=support,
    )


def evaluate(model: Model, dataset: Sequence[Conversation]) -> Metrics:
    """Metrics of the model's argmax predictions over every utterance of the dataset."""
    if not dataset:
        raise ValueError("evaluate needs a non-empty dataset")
    with tracer.start_as_current_span("evaluate") as span:
        labels, predictions = [], []
        for conversation in dataset:
            out = model.predict(conversation)
            labels.append(conversation.labels)
            predictions.append(out.predictions)
        metrics = compute_metrics(np.concatenate(labels), np.concatenate(predictions), model.spec.num_classes)
        set_attributes(span, utterances=int(metrics.support.sum()), accuracy=metrics.accuracy, weighted_f1=metrics.weighted_f1)
        return metrics


@dataclass
class BatchLoss:
    total: Tensor
    ce: float
    scl: float
    ucl: float
    utterances: int
    ucl_terms: Dict[str, float] = field(default_factory=dict)


def effective_weights(config: RunConfig) -> Tuple[float, float]:
    ablations = config.ablations
    lambda1 = 0.0 if "no_scl" in ablations else config.lambda1
    lambda2 = 0.0 if "no_ucl" in ablations else config.lambda2
    return lambda1, lambda2


def compute_batch_loss(model: Model, batch: Sequence[Conversation], training: bool = False, rng=None) -> BatchLoss:
    """
    Joint loss of one batch; utterances of all its conversations are pooled.

    Contrastive terms whose weight is zero (or that are ablated) are not computed.
    """
    outputs = [model.forward(conv, training=training, rng=rng) for conv in batch]
    labels = np.concatenate([conv.labels for conv in batch])
    logits = tc.concat([o.logits for o in outputs], axis=0)
    ce = cross_entropy(logits, labels)

    lambda1, lambda2 = effective_weights(model.config)
    text = tc.concat([o.text for o in outputs], axis=0) if lambda1 > 0 else None
    fused = tc.concat([o.fused for o in outputs], axis=0) if model.branches and (lambda1 > 0 or lambda2 > 0) else None

    scl = scl_loss(text, fused, labels, scl_config(model)) if lambda1 > 0 else Tensor(0.0)
    terms: Dict[str, float] = {}
    if lambda2 > 0 and model.branches:
        features = {m: tc.concat([o.features[m] for o in outputs], axis=0) for m in outputs[0].features}
        ucl, terms = ucl_loss(fused, features, model.params.ucl)
    else:
        ucl = Tensor(0.0)

    total = total_loss(ce, scl, ucl, lambda1, lambda2)
    return BatchLoss(total=total, ce=ce.item(), scl=scl.item(), ucl=ucl.item(), utterances=int(labels.size), ucl_terms=terms)


@dataclass
class TrainResult:
    model: Model
    history: pd.DataFrame
    best_epoch: int
    best_metrics: Metrics
    test_metrics: Optional[Metrics] = None
    output_dir: Optional[Path] = None


def _snapshot(params: Mapping[str, Tensor]) -> Dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in params.items()}


def _restore(params: Mapping[str, Tensor], snapshot: Mapping[str, np.ndarray]) -> None:
    for name, data in snapshot.items():
        params[name].data = data.copy()


def write_history(history: pd.DataFrame, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    history.to_csv(path, index=False, columns=HISTORY_COLUMNS, float_format="%.12g")
    return path


def train(
    config: RunConfig,
    train_set: Sequence[Conversation],
    val_set: Sequence[Conversation] = (),
    spec: Optional[FeatureSpec] = None,
    output_dir=None,
    test_set: Sequence[Conversation] = (),
) -> TrainResult:
    """
    Train with Adam on the joint objective and keep the best epoch by validation W-F1.

    Args:
        config: Run configuration (seed, optimiser, loss weights, ablations)
        train_set: Non-empty training conversations
        val_set: Model-selection conversations; the training set is used when empty
        spec: Feature dimensions; derived from the config profile when omitted
        output_dir: When set, history.csv and the best checkpoint are written there
        test_set: Optional conversations evaluated once with the best parameters

    Returns:
        TrainResult with the model restored to its best epoch
    """
    if not train_set:
        raise ValueError("train needs a non-empty training set")
    model = build_model(config, spec)
    params = model.parameters()
    state = AdamState.for_params(
        params, lr=config.learning_rate, beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps
    )
    dropout_rng = make_rng(config.seed, "dropout")
    shuffle_rng = make_rng(config.seed, "shuffle")
    lambda1, lambda2 = effective_weights(config)
    selection_set = val_set or train_set
    if not val_set:
        logger.info("No validation set; selecting the best epoch on training data")

    records: List[dict] = []
    best_wf1, best_epoch, best_params, best_metrics = -1.0, 0, _snapshot(params), None
    stale = 0

    with tracer.start_as_current_span("train") as run_span:
        set_attributes(run_span, seed=config.seed, epochs=config.epochs, parameters=model.parameter_count())
        for epoch in range(1, config.epochs + 1):
            with tracer.start_as_current_span("epoch") as span:
                shuffle_seed = int(shuffle_rng.integers(2**31)) if config.shuffle else None
                sums = {"ce": 0.0, "scl": 0.0, "ucl": 0.0}
                seen = 0
                for index, batch in enumerate(batch_iter(train_set, config.batch_size, shuffle_seed)):
                    batch_id = f"epoch {epoch} batch {index}"
                    tc.zero_grads(params)
                    try:
                        loss = compute_batch_loss(model, batch, training=True, rng=dropout_rng)
                        if not np.isfinite(loss.total.item()):
                            raise DivergenceError(batch_id)
                        tc.backward(loss.total)
                    except NonFiniteError as e:
                        raise DivergenceError(batch_id, str(e)) from e
                    tc.adam_step(params, tc.collect_grads(params), state)
                    for key in sums:
                        sums[key] += getattr(loss, key) * loss.utterances
                    seen += loss.utterances
                    logger.debug("%s: ce=%.6f scl=%.6f ucl=%.6f", batch_id, loss.ce, loss.scl, loss.ucl)

                metrics = evaluate(model, selection_set)
                record = {
                    "epoch": epoch,
                    "loss_ce": sums["ce"] / seen,
                    "loss_scl": sums["scl"] / seen if lambda1 > 0 else 0.0,
                    "loss_ucl": sums["ucl"] / seen if lambda2 > 0 else 0.0,
                    "val_acc": metrics.accuracy,
                    "val_wf1": metrics.weighted_f1,
                }
                records.append(record)
                set_attributes(span, **record)
                logger.info(
                    "epoch %d: ce=%.4f scl=%.4f ucl=%.4f val_acc=%.4f val_wf1=%.4f",
                    epoch,
                    record["loss_ce"],
                    record["loss_scl"],
                    record["loss_ucl"],
                    record["val_acc"],
                    record["val_wf1"],
                )

            if metrics.weighted_f1 > best_wf1:
                best_wf1, best_epoch, best_metrics = metrics.weighted_f1, epoch, metrics
                best_params = _snapshot(params)
                stale = 0
            else:
                stale += 1
                if config.patience and stale >= config.patience:
                    logger.info("Early stop at epoch %d; best epoch %d", epoch, best_epoch)
                    break

        _restore(params, best_params)
        set_attributes(run_span, best_epoch=best_epoch, best_val_wf1=best_wf1)

    history = pd.DataFrame.from_records(records, columns=HISTORY_COLUMNS)
    test_metrics = evaluate(model, test_set) if test_set else None

    out_path = None
    if output_dir is not None:
        out_path = Path(output_dir)
        write_history(history, out_path / HISTORY_FILE)
        meta = {"best_epoch": best_epoch, "best_val_wf1": best_wf1, "seed": config.seed}
        save_checkpoint(model, out_path / CHECKPOINT_DIR, meta)
        logger.info("Wrote history and checkpoint to %s", out_path)

    return TrainResult(
        model=model,
        history=history,
        best_epoch=best_epoch,
        best_metrics=best_metrics,
        test_metrics=test_metrics,
        output_dir=out_path,
    )


def dump_embeddings(model: Model, dataset: Sequence[Conversation], path) -> Path:
    """
    Write one CSV row per utterance: ids, true and predicted label, then X_fusion.

    Columns: conversation_id, utterance_index, label, predicted, x_0 ... x_{w-1}.
    """
    path = Path(path)
    with tracer.start_as_current_span("dump_embeddings") as span:
        frames = []
        for conversation in dataset:
            out = model.predict(conversation)
            fusion = out.fusion.data
            frame = pd.DataFrame(fusion, columns=[f"x_{k}" for k in range(fusion.shape[1])])
            frame.insert(0, "predicted", out.predictions.astype(np.int64))
            frame.insert(0, "label", conversation.labels)
            frame.insert(0, "utterance_index", np.arange(len(conversation)))
            frame.insert(0, "conversation_id", conversation.id)
            frames.append(frame)
        width = model.d + model.fused_width
        columns = ["conversation_id", "utterance_index", "label", "predicted"] + [f"x_{k}" for k in range(width)]
        table = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=columns)
        table.to_csv(path, index=False, float_format="%.17g")
        set_attributes(span, rows=len(table), path=str(path))
        logger.info("Wrote %d embedding rows to %s", len(table), path)
        return path


# ---------------------------------------------------------------------------
# Data preparation
# ---------------------------------------------------------------------------


@dataclass
class PreparedData:
    spec: FeatureSpec
    train: List[Conversation]
    val: List[Conversation]
    test: List[Conversation]


def _resolve(path: str, base_dir: Optional[Path]) -> Path:
    p = Path(path)
    return p if p.is_absolute() or base_dir is None else base_dir / p


def prepare_data(config: RunConfig, base_dir=None) -> PreparedData:
    """
    Load or synthesise the conversations a run needs.

    ``train_data`` takes precedence over ``synthetic_config``. Without ``val_data`` the
    trailing ``val_fraction`` of the training conversations is held out.
    """
    base_dir = Path(base_dir) if base_dir is not None else None
    if config.train_data:
        spec = config.feature_spec()
        train_set = load_dataset(_resolve(config.train_data, base_dir), spec)
    elif config.synthetic_config:
        synthetic = load_synthetic_config(_resolve(config.synthetic_config, base_dir))
        spec = synthetic.feature_spec()
        train_set = generate_synthetic(synthetic)
    else:
        raise ConfigError("Config needs either train_data or synthetic_config")

    if config.val_data:
        val_set = load_dataset(_resolve(config.val_data, base_dir), spec)
    else:
        train_set, val_set = split_dataset(train_set, config.val_fraction)
    test_set = load_dataset(_resolve(config.test_data, base_dir), spec) if config.test_data else []
    if not train_set:
        raise ConfigError("Training set is empty")
    return PreparedData(spec=spec, train=train_set, val=val_set, test=test_set)


# ---------------------------------------------------------------------------
# Seed sweeps and variant comparison
# ---------------------------------------------------------------------------


def _seed_summary(config: RunConfig, data: PreparedData, output_dir) -> dict:
    result = train(config, data.train, data.val, data.spec, output_dir, data.test)
    row = {
        "seed": config.seed,
        "best_epoch": result.best_epoch,
        "val_acc": result.best_metrics.accuracy,
        "val_wf1": result.best_metrics.weighted_f1,
    }
    if result.test_metrics is not None:
        row["test_acc"] = result.test_metrics.accuracy
        row["test_wf1"] = result.test_metrics.weighted_f1
    return row


def run_sweep(config: RunConfig, data: PreparedData, seeds: int, output_dir=None) -> Tuple[pd.DataFrame, dict]:
    """
    Train ``seeds`` runs with seeds config.seed, config.seed + 1, ...

    Runs execute in separate processes when ``config.workers > 1``.

    Returns:
        (one row per seed, mean and std of every metric column)
    """
    if seeds < 1:
        raise ConfigError(f"--seeds must be >= 1, got {seeds}")
    configs = [config.with_overrides(seed=config.seed + k) for k in range(seeds)]
    dirs = [Path(output_dir) / f"seed_{c.seed}" if output_dir is not None else None for c in configs]

    with tracer.start_as_current_span("sweep") as span:
        set_attributes(span, seeds=seeds, workers=config.workers)
        if config.workers > 1:
            with ProcessPoolExecutor(max_workers=config.workers) as pool:
                rows = list(pool.map(_seed_summary, configs, [data] * seeds, dirs))
        else:
            rows = [_seed_summary(c, data, d) for c, d in zip(configs, dirs)]

    table = pd.DataFrame.from_records(rows)
    metric_columns = [c for c in table.columns if c not in ("seed", "best_epoch")]
    summary = {c: {"mean": float(table[c].mean()), "std": float(table[c].std(ddof=0))} for c in metric_columns}
    if output_dir is not None:
        Path(output_dir).mkdir(parents=True, exist_ok=True)
        table.to_csv(Path(output_dir) / SWEEP_FILE, index=False, float_format="%.12g")
    return table, summary


def compare_variants(
    config: RunConfig,
    variants: Mapping[str, Mapping[str, object]],
    data: PreparedData,
    heldout: Sequence[Conversation],
    seeds: Sequence[int],
) -> pd.DataFrame:
    """
    Train every named config variant on every seed and score it on held-out data.

    Args:
        config: Base configuration
        variants: Variant name -> RunConfig field overrides (e.g. {"ablate": "no_mpt"})
        data: Training and validation conversations
        heldout: Conversations scored with each run's best parameters
        seeds: Seeds to train each variant with

    Returns:
        One row per (variant, seed) with held-out accuracy and W-F1
    """
    rows = []
    for name, overrides in variants.items():
        for seed in seeds:
            variant_config = config.with_overrides(seed=seed, **overrides)
            result = train(variant_config, data.train, data.val, data.spec)
            metrics = evaluate(result.model, heldout)
            rows.append({"variant": name, "seed": seed, "acc": metrics.accuracy, "wf1": metrics.weighted_f1})
            logger.info("variant %s seed %d: held-out W-F1 %.4f", name, seed, metrics.weighted_f1)
    return pd.DataFrame.from_records(rows)

"""
Classifier head, cross-entropy and the hybrid contrastive objectives.

Unsupervised term: InfoNCE between a prediction of each modality's features made
from the fused transformer output and the modality's own features, with every other
utterance of the batch as a negative. Supervised term: SupCon over the
row-concatenation of text features and projected fused features.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np

import tensor_core as tc
from tensor_core import ParameterGroup, ShapeMismatchError, Tensor

logger = logging.getLogger(__name__)

Scalar = Union[float, Tensor]

# Added to self-similarities before the log-softmax; exp() of it underflows to exactly 0.
_SELF_MASK = -1e9


@dataclass
class Affine(ParameterGroup):
    w: Tensor
    b: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, fan_in: int, fan_out: int, zero: bool = False) -> "Affine":
        w = tc.zeros((fan_in, fan_out)) if zero else tc.xavier_uniform(rng, fan_in, fan_out)
        return cls(w=w, b=tc.zeros((fan_out,)))

    def __call__(self, x: Tensor) -> Tensor:
        x = tc.as_tensor(x)
        if x.shape[-1] != self.w.shape[0]:
            raise ShapeMismatchError(f"Affine map expects width {self.w.shape[0]}, got input {x.shape}")
        return tc.add(tc.matmul(x, self.w), self.b)


@dataclass
class UclParams(ParameterGroup):
    """One prediction network per modality, each mapping the fused width k*d to d."""

    text: Optional[Affine] = None
    audio: Optional[Affine] = None
    visual: Optional[Affine] = None

    @classmethod
    def init(cls, rng: np.random.Generator, in_width: int, d: int, modalities=("text", "audio", "visual")) -> "UclParams":
        return cls(**{m: Affine.init(rng, in_width, d) for m in modalities})

    def predictor(self, modality: str) -> Affine:
        net = getattr(self, modality, None)
        if net is None:
            raise KeyError(f"No UCL predictor for modality '{modality}'")
        return net


@dataclass
class SclConfig(ParameterGroup):
    tau: float = 0.07
    projection: Optional[Affine] = None

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"SCL temperature must be positive, got {self.tau}")


@dataclass
class ClassifierParams(ParameterGroup):
    head: Affine

    @classmethod
    def init(cls, rng: np.random.Generator, width: int, num_classes: int) -> "ClassifierParams":
        return cls(head=Affine.init(rng, width, num_classes))


def _zero() -> Tensor:
    return Tensor(0.0)


def _labels_array(labels, count: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size != count:
        raise ShapeMismatchError(f"{labels.size} labels for {count} samples")
    return labels


def modality_ucl(fused: Tensor, features: Tensor, predictor: Affine) -> Tensor:
    """
    InfoNCE between predictions G(X_mpt_i) and modality features s_j (one modality).

    Both sides are L2-normalised, so the score is exp(cosine similarity). Returns
    -mean_i log softmax_j(score_ij)[i]; zero with a warning when there are fewer than
    two utterances.
    """
    fused, features = tc.as_tensor(fused), tc.as_tensor(features)
    count = features.shape[0]
    if fused.shape[0] != count:
        raise ShapeMismatchError(f"modality_ucl: {fused.shape[0]} fused rows vs {count} feature rows")
    if count < 2:
        logger.warning("UCL skipped: %d utterance(s) in batch leaves no negatives", count)
        return _zero()
    predicted = tc.l2_normalize(predictor(fused), axis=-1)
    target = tc.l2_normalize(features, axis=-1)
    log_probs = tc.log_softmax(tc.matmul(predicted, tc.transpose(target)), axis=1)
    return tc.scale(tc.sum_(tc.mul(log_probs, Tensor(np.eye(count)))), -1.0 / count)


def ucl_loss(fused: Tensor, features: Mapping[str, Tensor], params: UclParams) -> Tuple[Tensor, Dict[str, float]]:
    """
    Sum of per-modality InfoNCE terms.

    Args:
        fused: B x k*d fused transformer output of the whole batch
        features: modality name -> B x d features of the same utterances
        params: Prediction network per modality

    Returns:
        (total loss, modality -> term value)
    """
    total = None
    terms = {}
    for modality, feats in features.items():
        term = modality_ucl(fused, feats, params.predictor(modality))
        terms[modality] = term.item()
        total = term if total is None else tc.add(total, term)
    return (total if total is not None else _zero()), terms


def supcon_loss(features: Tensor, labels, tau: float) -> Tensor:
    """
    Supervised contrastive loss over the rows of ``features``.

    For anchor i with positives P(i) (same label, excluding i) and candidates A(i)
    (every other row): -1/|P(i)| sum_p log(exp(c_i.c_p/tau) / sum_a exp(c_i.c_a/tau)),
    on L2-normalised rows, averaged over anchors that have at least one positive.
    """
    features = tc.as_tensor(features)
    count = features.shape[0]
    labels = _labels_array(labels, count)
    if tau <= 0:
        raise ValueError(f"SCL temperature must be positive, got {tau}")

    positives = (labels[:, None] == labels[None, :]).astype(tc.DTYPE)
    np.fill_diagonal(positives, 0.0)
    per_anchor = positives.sum(axis=1)
    valid = per_anchor > 0
    if not valid.any():
        logger.warning("SCL skipped: no anchor among %d samples has a same-label partner", count)
        return _zero()
    weights = np.zeros_like(positives)
    weights[valid] = positives[valid] / per_anchor[valid, None] / valid.sum()

    normed = tc.l2_normalize(features, axis=-1)
    similarity = tc.scale(tc.matmul(normed, tc.transpose(normed)), 1.0 / tau)
    masked = tc.add(similarity, Tensor(np.eye(count) * _SELF_MASK))
    log_probs = tc.log_softmax(masked, axis=1)
    return tc.scale(tc.sum_(tc.mul(log_probs, Tensor(weights))), -1.0)


def scl_loss(text: Tensor, fused: Optional[Tensor], labels, cfg: SclConfig) -> Tensor:
    """
    SupCon over [S_t; P_c(X_mpt)] with labels duplicated.

    Without fused features (no auxiliary modality) the loss runs over S_t alone.
    """
    text = tc.as_tensor(text)
    labels = _labels_array(labels, text.shape[0])
    if fused is None:
        return supcon_loss(text, labels, cfg.tau)
    fused = tc.as_tensor(fused)
    if fused.shape[0] != text.shape[0]:
        raise ShapeMismatchError(f"scl_loss: {text.shape[0]} text rows vs {fused.shape[0]} fused rows")
    if cfg.projection is None:
        raise ValueError("scl_loss needs a projection for the fused features")
    samples = tc.concat([text, cfg.projection(fused)], axis=0)
    return supcon_loss(samples, np.concatenate([labels, labels]), cfg.tau)


def classify(fusion: Tensor, params: ClassifierParams) -> Tuple[Tensor, np.ndarray]:
    """
    Class logits and argmax predictions (ties go to the lowest class index).

    Returns:
        (L x J logits, L predictions)
    """
    logits = params.head(fusion)
    return logits, np.argmax(logits.data, axis=1)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the true class."""
    logits = tc.as_tensor(logits)
    count, classes = logits.shape
    labels = _labels_array(labels, count)
    if labels.min() < 0 or labels.max() >= classes:
        raise ShapeMismatchError(f"cross_entropy: labels outside [0, {classes})")
    one_hot = np.zeros((count, classes))
    one_hot[np.arange(count), labels] = 1.0
    return tc.scale(tc.sum_(tc.mul(tc.log_softmax(logits, axis=1), Tensor(one_hot))), -1.0 / count)


def total_loss(ce: Scalar, scl: Scalar, ucl: Scalar, lambda1: float = 0.1, lambda2: float = 0.05) -> Tensor:
    """L = L_CE + lambda1 * L_SCL + lambda2 * L_UCL; zero-weighted terms are left out entirely."""
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError(f"Loss weights must be non-negative, got lambda1={lambda1}, lambda2={lambda2}")
    total = tc.as_tensor(ce)
    if lambda1 > 0:
        total = tc.add(total, tc.scale(tc.as_tensor(scl), lambda1))
    if lambda2 > 0:
        total = tc.add(total, tc.scale(tc.as_tensor(ucl), lambda2))
    return total

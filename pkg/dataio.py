"""
Conversation datasets: on-disk format, validation, synthetic generation and batching.
"""

import json
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from telemetry import get_tracer
from tensor_core import make_rng

logger = logging.getLogger(__name__)
tracer = get_tracer(__name__)

MODALITIES = ("text", "audio", "visual")


class DatasetValidationError(ValueError):
    pass


class SyntheticConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSpec:
    """Per-dataset feature dimensions, class count and speaker bound."""

    d_t: int = 1024
    d_a: int = 1582
    d_v: int = 342
    num_classes: int = 6
    max_speakers: int = 2
    class_names: Tuple[str, ...] = ()

    def __post_init__(self):
        for name in ("d_t", "d_a", "d_v", "num_classes", "max_speakers"):
            if getattr(self, name) < 1:
                raise DatasetValidationError(f"FeatureSpec.{name} must be positive, got {getattr(self, name)}")

    def dim(self, modality: str) -> int:
        return {"text": self.d_t, "audio": self.d_a, "visual": self.d_v}[modality]

    def class_name(self, index: int) -> str:
        return self.class_names[index] if index < len(self.class_names) else str(index)


IEMOCAP_CLASSES = ("happy", "sad", "neutral", "angry", "excited", "frustrated")
MELD_CLASSES = ("neutral", "surprise", "fear", "sadness", "joy", "disgust", "anger")

PROFILES: Dict[str, FeatureSpec] = {
    "iemocap": FeatureSpec(1024, 1582, 342, len(IEMOCAP_CLASSES), 2, IEMOCAP_CLASSES),
    "meld": FeatureSpec(1024, 300, 342, len(MELD_CLASSES), 9, MELD_CLASSES),
}


def parse_spec_profile(text: str, max_speakers: int = 2) -> FeatureSpec:
    """
    Resolve a feature profile selector.

    Args:
        text: ``iemocap``, ``meld`` or ``custom:dt,da,dv,J``
        max_speakers: Speaker bound used by custom profiles

    Returns:
        The FeatureSpec for that profile
    """
    key = text.strip().lower()
    if key in PROFILES:
        return PROFILES[key]
    if key.startswith("custom:"):
        parts = key[len("custom:") :].split(",")
        if len(parts) != 4:
            raise DatasetValidationError(f"Custom profile needs dt,da,dv,J - got '{text}'")
        try:
            d_t, d_a, d_v, num_classes = (int(p) for p in parts)
        except ValueError:
            raise DatasetValidationError(f"Custom profile values must be integers - got '{text}'") from None
        return FeatureSpec(d_t, d_a, d_v, num_classes, max_speakers)
    raise DatasetValidationError(f"Unknown feature profile '{text}'")


@dataclass
class Utterance:
    speaker: int
    label: int
    text_feat: np.ndarray
    audio_feat: np.ndarray
    visual_feat: np.ndarray

    def feature(self, modality: str) -> np.ndarray:
        return getattr(self, f"{modality}_feat")


@dataclass
class Conversation:
    id: str
    utterances: List[Utterance]
    speaker_count: int = 2

    def __len__(self) -> int:
        return len(self.utterances)

    @property
    def speakers(self) -> List[int]:
        return [u.speaker for u in self.utterances]

    @property
    def labels(self) -> np.ndarray:
        return np.array([u.label for u in self.utterances], dtype=np.int64)

    def features(self, modality: str) -> np.ndarray:
        """L x d_m matrix of one modality."""
        return np.stack([u.feature(modality) for u in self.utterances])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Conversation):
            return NotImplemented
        if self.id != other.id or self.speaker_count != other.speaker_count or len(self) != len(other):
            return False
        for a, b in zip(self.utterances, other.utterances):
            if a.speaker != b.speaker or a.label != b.label:
                return False
            if any(not np.array_equal(a.feature(m), b.feature(m)) for m in MODALITIES):
                return False
        return True


def _validate_record(record: dict, spec: FeatureSpec, line_no: int) -> Conversation:
    conv_id = str(record.get("id", f"line-{line_no}"))
    speakers = record.get("speakers")
    labels = record.get("labels")
    if speakers is None or labels is None:
        raise DatasetValidationError(f"Conversation {conv_id}: missing 'speakers' or 'labels'")
    length = len(speakers)
    if length < 1:
        raise DatasetValidationError(f"Conversation {conv_id}: has no utterances")
    if len(labels) != length:
        raise DatasetValidationError(f"Conversation {conv_id}: {len(labels)} labels for {length} utterances")

    features = {}
    for modality in MODALITIES:
        rows = record.get(modality)
        if rows is None:
            raise DatasetValidationError(f"Conversation {conv_id}: missing modality '{modality}'")
        if len(rows) != length:
            raise DatasetValidationError(f"Conversation {conv_id}: {modality} has {len(rows)} rows for {length} utterances")
        expected = spec.dim(modality)
        for index, row in enumerate(rows):
            if row is None:
                raise DatasetValidationError(f"Conversation {conv_id}, utterance {index}: missing modality '{modality}'")
            if len(row) != expected:
                raise DatasetValidationError(
                    f"Conversation {conv_id}, utterance {index}: {modality} dim mismatch "
                    f"(expected {expected}, got {len(row)})"
                )
        arr = np.asarray(rows, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise DatasetValidationError(f"Conversation {conv_id}: non-finite {modality} features")
        features[modality] = arr

    for index, (speaker, label) in enumerate(zip(speakers, labels)):
        if not 0 <= int(label) < spec.num_classes:
            raise DatasetValidationError(
                f"Conversation {conv_id}, utterance {index}: label {label} outside [0, {spec.num_classes})"
            )
        if int(speaker) < 0:
            raise DatasetValidationError(f"Conversation {conv_id}, utterance {index}: negative speaker id {speaker}")

    speaker_count = max(2, max(int(s) for s in speakers) + 1)
    utterances = [
        Utterance(
            speaker=int(speakers[i]),
            label=int(labels[i]),
            text_feat=features["text"][i],
            audio_feat=features["audio"][i],
            visual_feat=features["visual"][i],
        )
        for i in range(length)
    ]
    return Conversation(id=conv_id, utterances=utterances, speaker_count=speaker_count)


def load_dataset(path, spec: FeatureSpec) -> List[Conversation]:
    """
    Load a line-delimited conversation file and validate it against a feature spec.

    Args:
        path: File with one JSON conversation record per line
        spec: Expected dimensions and class count

    Returns:
        Conversations in file order
    """
    path = Path(path)
    with tracer.start_as_current_span("load_dataset") as span:
        span.set_attribute("path", str(path))
        conversations = []
        with path.open("r", encoding="utf-8") as handle:
            for line_no, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as e:
                    raise DatasetValidationError(f"{path}:{line_no}: invalid JSON ({e})") from None
                conversations.append(_validate_record(record, spec, line_no))
        span.set_attribute("conversations", len(conversations))
        logger.info("Loaded %d conversations from %s", len(conversations), path)
        return conversations


def save_dataset(path, conversations: Sequence[Conversation]) -> Path:
    """Write conversations in the line-delimited format read by load_dataset."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for conv in conversations:
            record = {
                "id": conv.id,
                "speakers": conv.speakers,
                "labels": [int(x) for x in conv.labels],
                "text": conv.features("text").tolist(),
                "audio": conv.features("audio").tolist(),
                "visual": conv.features("visual").tolist(),
            }
            handle.write(json.dumps(record) + "\n")
    return path


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


@dataclass
class SyntheticConfig:
    """
    Desk-scale stand-in for a multimodal conversation corpus.

    ``cross_modal_signal`` is the fraction of the label signal carried only by the
    audio and visual features; the text features carry the rest.
    """

    n_conversations: int = 40
    min_length: int = 8
    max_length: int = 8
    num_classes: int = 3
    num_speakers: int = 2
    d_t: int = 16
    d_a: int = 16
    d_v: int = 16
    class_separation: float = 3.0
    cross_modal_signal: float = 0.5
    label_persistence: float = 0.0
    class_weights: Optional[List[float]] = None
    seed: int = 7

    def validate(self) -> None:
        if self.n_conversations < 0:
            raise SyntheticConfigError("n_conversations must be non-negative")
        if self.min_length < 1 or self.max_length < self.min_length:
            raise SyntheticConfigError(f"Conversation length range [{self.min_length}, {self.max_length}] is empty")
        if self.num_classes < 1 or self.num_speakers < 2:
            raise SyntheticConfigError("num_classes must be >= 1 and num_speakers >= 2")
        if min(self.d_t, self.d_a, self.d_v) < 1:
            raise SyntheticConfigError("Feature dimensions must be positive")
        if not 0.0 <= self.cross_modal_signal <= 1.0:
            raise SyntheticConfigError(f"cross_modal_signal={self.cross_modal_signal} outside [0, 1]")
        if not 0.0 <= self.label_persistence < 1.0:
            raise SyntheticConfigError(f"label_persistence={self.label_persistence} outside [0, 1)")
        if self.class_weights is not None:
            if len(self.class_weights) != self.num_classes or min(self.class_weights) < 0 or sum(self.class_weights) <= 0:
                raise SyntheticConfigError("class_weights must list one non-negative weight per class")

    def class_distribution(self) -> np.ndarray:
        if self.class_weights is None:
            return np.full(self.num_classes, 1.0 / self.num_classes)
        weights = np.asarray(self.class_weights, dtype=np.float64)
        return weights / weights.sum()

    def feature_spec(self) -> FeatureSpec:
        return FeatureSpec(self.d_t, self.d_a, self.d_v, self.num_classes, self.num_speakers)


def load_synthetic_config(path) -> SyntheticConfig:
    """Read a flat ``key = value`` synthetic-data config."""
    known = {f.name: f for f in fields(SyntheticConfig)}
    values = {}
    for line_no, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SyntheticConfigError(f"{path}:{line_no}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise SyntheticConfigError(f"{path}:{line_no}: unknown key '{key}'")
        try:
            if key == "class_weights":
                values[key] = [float(v) for v in value.split(",")]
            elif key in ("class_separation", "cross_modal_signal", "label_persistence"):
                values[key] = float(value)
            else:
                values[key] = int(value)
        except ValueError:
            raise SyntheticConfigError(f"{path}:{line_no}: bad value '{value}' for '{key}'") from None
    config = SyntheticConfig(**values)
    config.validate()
    return config


def _unit_directions(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    directions = rng.standard_normal((count, dim))
    return directions / np.linalg.norm(directions, axis=1, keepdims=True)


def generate_synthetic(config: SyntheticConfig) -> List[Conversation]:
    """
    Generate a labelled multimodal conversation set.

    Each class owns a random unit direction per modality. An utterance's feature is
    ``amplitude * direction[label] + noise`` with noise of unit expected norm; text
    gets amplitude ``separation * (1 - s)`` and audio/visual ``separation * s``.

    Returns:
        Conversations; identical configs give bitwise-identical output
    """
    config.validate()
    with tracer.start_as_current_span("generate_synthetic") as span:
        span.set_attribute("seed", config.seed)
        span.set_attribute("n_conversations", config.n_conversations)
        rng = make_rng(config.seed, "synthetic")
        dims = {"text": config.d_t, "audio": config.d_a, "visual": config.d_v}
        directions = {m: _unit_directions(rng, config.num_classes, dims[m]) for m in MODALITIES}
        amplitude = {
            "text": config.class_separation * (1.0 - config.cross_modal_signal),
            "audio": config.class_separation * config.cross_modal_signal,
            "visual": config.class_separation * config.cross_modal_signal,
        }
        distribution = config.class_distribution()

        conversations = []
        for index in range(config.n_conversations):
            length = int(rng.integers(config.min_length, config.max_length + 1))
            speakers = rng.integers(0, config.num_speakers, size=length)
            labels = np.empty(length, dtype=np.int64)
            last_label: Dict[int, int] = {}
            for i in range(length):
                fresh = int(rng.choice(config.num_classes, p=distribution))
                keep = rng.random() < config.label_persistence
                speaker = int(speakers[i])
                labels[i] = last_label[speaker] if keep and speaker in last_label else fresh
                last_label[speaker] = int(labels[i])

            feats = {}
            for m in MODALITIES:
                noise = rng.standard_normal((length, dims[m])) / np.sqrt(dims[m])
                feats[m] = amplitude[m] * directions[m][labels] + noise

            utterances = [
                Utterance(int(speakers[i]), int(labels[i]), feats["text"][i], feats["audio"][i], feats["visual"][i])
                for i in range(length)
            ]
            conversations.append(Conversation(f"syn-{index:04d}", utterances, config.num_speakers))
        return conversations


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


def batch_iter(
    dataset: Sequence[Conversation], batch_size: int, shuffle_seed: Optional[int] = None
) -> Iterator[List[Conversation]]:
    """
    Partition whole conversations into batches.

    Args:
        dataset: Conversations of one epoch
        batch_size: Conversations per batch (the last batch may be smaller)
        shuffle_seed: Permute conversation order deterministically when given

    Yields:
        Lists of conversations; each conversation appears exactly once
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(dataset))
    if shuffle_seed is not None:
        order = make_rng(shuffle_seed, "shuffle").permutation(len(dataset))
    for start in range(0, len(dataset), batch_size):
        yield [dataset[i] for i in order[start : start + batch_size]]


def split_dataset(dataset: Sequence[Conversation], val_fraction: float) -> Tuple[List[Conversation], List[Conversation]]:
    """Hold out the trailing fraction of conversations (at least one when the fraction is positive)."""
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError(f"val_fraction={val_fraction} outside [0, 1)")
    if val_fraction == 0.0 or len(dataset) < 2:
        return list(dataset), []
    n_val = max(1, int(round(len(dataset) * val_fraction)))
    n_val = min(n_val, len(dataset) - 1)
    return list(dataset[:-n_val]), list(dataset[-n_val:])


@dataclass
class DatasetSummary:
    conversations: int = 0
    utterances: int = 0
    class_counts: Dict[int, int] = field(default_factory=dict)


def summarize(dataset: Sequence[Conversation]) -> DatasetSummary:
    summary = DatasetSummary(conversations=len(dataset))
    for conv in dataset:
        summary.utterances += len(conv)
        for label in conv.labels:
            summary.class_counts[int(label)] = summary.class_counts.get(int(label), 0) + 1
    return summary

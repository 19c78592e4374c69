"""
End-to-end model assembly, forward pass and checkpoint files.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

import tensor_core as tc
from dataio import Conversation, FeatureSpec
from encoders import BiLstmParams, GateFilterParams, encode_context, modal_feature_filter
from graph_rgcn import RgcnParams, build_graph, enhance_text, rgcn_stack
from losses import Affine, ClassifierParams, SclConfig, UclParams, classify
from mpt import MptStack, fuse_branches, mpt_forward
from run_config import ConfigError, RunConfig
from telemetry import get_tracer
from tensor_core import ParameterGroup, Tensor, make_rng

logger = logging.getLogger(__name__)
tracer = get_tracer(__name__)

# Prompt branches are fused visual first, then audio.
BRANCH_ORDER = ("visual", "audio")

PARAMS_FILE = "params.bin"
MANIFEST_FILE = "manifest.tsv"
CONFIG_FILE = "config.txt"
META_FILE = "meta.json"


class ModelConfigError(ValueError):
    pass


@dataclass
class ModelParams(ParameterGroup):
    lstm_text: Optional[BiLstmParams] = None
    lstm_audio: Optional[BiLstmParams] = None
    lstm_visual: Optional[BiLstmParams] = None
    filter_audio: Optional[GateFilterParams] = None
    filter_visual: Optional[GateFilterParams] = None
    rgcn: List[RgcnParams] = field(default_factory=list)
    mpt_visual: Optional[MptStack] = None
    mpt_audio: Optional[MptStack] = None
    ucl: Optional[UclParams] = None
    scl_projection: Optional[Affine] = None
    classifier: Optional[ClassifierParams] = None


@dataclass
class ForwardOutput:
    text: Tensor  # S_t, L x d
    fused: Optional[Tensor]  # X_mpt, L x k*d
    fusion: Tensor  # X_fusion, L x (1+k)*d
    logits: Tensor
    predictions: np.ndarray
    features: Dict[str, Tensor]  # per-modality features the UCL contrasts against


@dataclass
class Model:
    config: RunConfig
    spec: FeatureSpec
    params: ModelParams
    primary: str
    branches: Tuple[str, ...]

    @property
    def d(self) -> int:
        return self.config.d

    @property
    def fused_width(self) -> int:
        return len(self.branches) * self.d

    def parameters(self) -> Dict[str, Tensor]:
        return self.params.parameters()

    def parameter_count(self) -> int:
        return self.params.parameter_count()

    def forward(self, conversation: Conversation, training: bool = False, rng=None) -> ForwardOutput:
        """
        Map one conversation to its fused features and class logits.

        Args:
            conversation: Utterances with all three modalities
            training: Enable dropout inside the prompt transformers
            rng: Dropout stream (required when training with dropout)

        Returns:
            ForwardOutput with S_t, X_mpt (None without auxiliary modalities), X_fusion and logits
        """
        ablations = self.config.ablations
        p = self.params

        hidden = {}
        for modality in (self.primary,) + self.branches:
            hidden[modality] = encode_context(conversation.features(modality), getattr(p, f"lstm_{modality}"))

        if "no_rgcn" in ablations:
            text = hidden[self.primary]
        else:
            graph = build_graph(conversation.speakers, self.config.window, self.spec.max_speakers)
            text = enhance_text(
                rgcn_stack(hidden[self.primary], graph, p.rgcn, "speaker"),
                rgcn_stack(hidden[self.primary], graph, p.rgcn, "context"),
            )

        prompts = {}
        for modality in self.branches:
            gate = getattr(p, f"filter_{modality}")
            prompts[modality] = hidden[modality] if gate is None else modal_feature_filter(hidden[modality], gate)

        if "no_mpt" in ablations:
            outputs = [prompts[m] for m in self.branches]
        else:
            outputs = [
                mpt_forward(prompts[m], text, getattr(p, f"mpt_{m}"), training=training, rng=rng) for m in self.branches
            ]
        fused, fusion = fuse_branches(outputs, text)
        logits, predictions = classify(fusion, p.classifier)

        features = {self.primary: text}
        features.update(prompts)
        return ForwardOutput(text=text, fused=fused, fusion=fusion, logits=logits, predictions=predictions, features=features)

    def predict(self, conversation: Conversation) -> ForwardOutput:
        with tc.no_grad():
            return self.forward(conversation, training=False)


def resolve_modalities(config: RunConfig) -> Tuple[str, Tuple[str, ...]]:
    """
    Primary modality and prompt branches for a modality selection.

    Text is primary when selected, otherwise the first selected modality; the other
    selected modalities become prompt branches.
    """
    selected = config.modality_set
    if not selected:
        raise ModelConfigError(f"No modality selected in '{config.modalities}'")
    primary = selected[0]
    branches = tuple(m for m in BRANCH_ORDER if m in selected and m != primary)
    return primary, branches


def build_model(config: RunConfig, spec: Optional[FeatureSpec] = None) -> Model:
    """
    Initialise every parameter group of the model from the configured seed.

    Args:
        config: Validated run configuration
        spec: Feature dimensions; derived from the config profile when omitted

    Returns:
        Model whose parameter set reflects the ablation and modality switches
    """
    try:
        config.validate()
    except ConfigError as e:
        raise ModelConfigError(str(e)) from None
    spec = spec or config.feature_spec()
    primary, branches = resolve_modalities(config)
    ablations = config.ablations
    d = config.d

    with tracer.start_as_current_span("build_model") as span:
        encoder_rng = make_rng(config.seed, "encoders")
        params = ModelParams()
        for modality in ("text", "audio", "visual"):
            if modality == primary or modality in branches:
                setattr(params, f"lstm_{modality}", BiLstmParams.init(encoder_rng, spec.dim(modality), d))
        for modality in ("audio", "visual"):
            if modality in branches and f"full_{modality}" not in ablations:
                gate = GateFilterParams.init(encoder_rng, d, config.bottleneck, config.leaky_slope)
                setattr(params, f"filter_{modality}", gate)

        if "no_rgcn" not in ablations:
            graph_rng = make_rng(config.seed, "graph_rgcn")
            params.rgcn = [RgcnParams.init(graph_rng, d, spec.max_speakers) for _ in range(config.rgcn_layers)]

        if "no_mpt" not in ablations:
            mpt_rng = make_rng(config.seed, "mpt")
            for modality in BRANCH_ORDER:
                if modality in branches:
                    stack = MptStack.init(mpt_rng, d, config.mpt_layers, config.heads, config.ffn_width, config.dropout)
                    setattr(params, f"mpt_{modality}", stack)

        fused_width = len(branches) * d
        loss_rng = make_rng(config.seed, "losses")
        if branches and "no_ucl" not in ablations and config.lambda2 > 0:
            params.ucl = UclParams.init(loss_rng, fused_width, d, (primary,) + branches)
        if branches and "no_scl" not in ablations and config.lambda1 > 0:
            params.scl_projection = Affine.init(loss_rng, fused_width, d)

        params.classifier = ClassifierParams.init(make_rng(config.seed, "classifier"), d + fused_width, spec.num_classes)

        model = Model(config=config, spec=spec, params=params, primary=primary, branches=branches)
        span.set_attribute("parameter_count", model.parameter_count())
        logger.debug("Built model: primary=%s branches=%s parameters=%d", primary, branches, model.parameter_count())
        return model


def scl_config(model: Model) -> SclConfig:
    return SclConfig(tau=model.config.tau, projection=model.params.scl_projection)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: Model, path, meta: Optional[dict] = None) -> Path:
    """
    Write a checkpoint directory.

    Layout: ``params.bin`` holds every parameter as little-endian float64 in manifest
    order; ``manifest.tsv`` lists name, shape and element offset; ``config.txt`` is
    the run config; ``meta.json`` carries feature dims and training metadata.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    offset = 0
    rows = ["name\tshape\toffset"]
    chunks = []
    for name, tensor in model.params.named_parameters():
        rows.append(f"{name}\t{','.join(str(s) for s in tensor.shape)}\t{offset}")
        chunks.append(np.ascontiguousarray(tensor.data, dtype="<f8").reshape(-1))
        offset += tensor.size
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")
    (path / PARAMS_FILE).write_bytes(blob.astype("<f8").tobytes())
    (path / MANIFEST_FILE).write_text("\n".join(rows) + "\n", encoding="utf-8")
    (path / CONFIG_FILE).write_text(model.config.to_text(), encoding="utf-8")
    spec = model.spec
    payload = {
        "feature_spec": {
            "d_t": spec.d_t,
            "d_a": spec.d_a,
            "d_v": spec.d_v,
            "num_classes": spec.num_classes,
            "max_speakers": spec.max_speakers,
            "class_names": list(spec.class_names),
        }
    }
    payload.update(meta or {})
    (path / META_FILE).write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    return path


def read_manifest(path) -> List[Tuple[str, Tuple[int, ...], int]]:
    entries = []
    lines = (Path(path) / MANIFEST_FILE).read_text(encoding="utf-8").splitlines()
    for line in lines[1:]:
        if not line.strip():
            continue
        name, shape, offset = line.split("\t")
        dims = tuple(int(s) for s in shape.split(",") if s)
        entries.append((name, dims, int(offset)))
    return entries


def load_checkpoint(path) -> Tuple[Model, dict]:
    """
    Rebuild a model from a checkpoint directory.

    Returns:
        (model with restored parameters, metadata dict)
    """
    path = Path(path)
    if not (path / MANIFEST_FILE).is_file():
        raise ModelConfigError(f"Not a checkpoint directory: {path}")
    config = RunConfig.from_text((path / CONFIG_FILE).read_text(encoding="utf-8"), source=str(path / CONFIG_FILE))
    meta = json.loads((path / META_FILE).read_text(encoding="utf-8"))
    fs = meta["feature_spec"]
    spec = FeatureSpec(fs["d_t"], fs["d_a"], fs["d_v"], fs["num_classes"], fs["max_speakers"], tuple(fs["class_names"]))
    model = build_model(config, spec)

    blob = np.frombuffer((path / PARAMS_FILE).read_bytes(), dtype="<f8")
    params = model.parameters()
    entries = read_manifest(path)
    if {name for name, _, _ in entries} != set(params):
        raise ModelConfigError(f"Checkpoint {path} does not match the configured model's parameter set")
    for name, shape, offset in entries:
        count = int(np.prod(shape)) if shape else 1
        if tuple(params[name].shape) != shape or offset + count > blob.size:
            raise ModelConfigError(f"Checkpoint entry {name} with shape {shape} does not fit the model")
        params[name].data = blob[offset : offset + count].astype(tc.DTYPE).reshape(shape)
    logger.info("Loaded checkpoint %s (%d parameters)", path, model.parameter_count())
    return model, meta

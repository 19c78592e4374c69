"""
Run configuration: a flat ``key = value`` file mirroring RunConfig.
"""

import logging
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import FrozenSet, Tuple

from dataio import DatasetValidationError, FeatureSpec, parse_spec_profile

logger = logging.getLogger(__name__)

ABLATIONS = ("no_mpt", "no_ucl", "no_scl", "no_rgcn", "full_audio", "full_visual")
MODALITY_CODES = {"t": "text", "a": "audio", "v": "visual"}
PROFILE_LEARNING_RATES = {"iemocap": 1e-4, "meld": 3e-4}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # data
    profile: str = "iemocap"
    max_speakers: int = 2
    train_data: str = ""
    val_data: str = ""
    test_data: str = ""
    synthetic_config: str = ""
    val_fraction: float = 0.1
    # model
    d: int = 100
    d_b: int = 0
    d_ff: int = 0
    mpt_layers: int = 5
    heads: int = 5
    window: int = 2
    rgcn_layers: int = 1
    dropout: float = 0.2
    leaky_slope: float = 0.01
    # objective
    lambda1: float = 0.1
    lambda2: float = 0.05
    tau: float = 0.07
    # optimisation
    lr: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 300
    batch_size: int = 4
    seed: int = 0
    patience: int = 0
    shuffle: bool = True
    # variants
    ablate: str = ""
    modalities: str = "t,a,v"
    # outputs
    output_dir: str = ""
    workers: int = 1

    @property
    def bottleneck(self) -> int:
        return self.d_b or max(1, self.d // 4)

    @property
    def ffn_width(self) -> int:
        return self.d_ff or 4 * self.d

    @property
    def learning_rate(self) -> float:
        if self.lr > 0:
            return self.lr
        return PROFILE_LEARNING_RATES.get(self.profile.strip().lower(), 1e-4)

    @property
    def ablations(self) -> FrozenSet[str]:
        return frozenset(a.strip() for a in self.ablate.split(",") if a.strip())

    @property
    def modality_set(self) -> Tuple[str, ...]:
        """Selected modalities in canonical text, audio, visual order."""
        codes = {c.strip().lower() for c in self.modalities.split(",") if c.strip()}
        return tuple(name for code, name in MODALITY_CODES.items() if code in codes)

    def feature_spec(self) -> FeatureSpec:
        try:
            return parse_spec_profile(self.profile, self.max_speakers)
        except DatasetValidationError as e:
            raise ConfigError(str(e)) from None

    def validate(self) -> "RunConfig":
        self.feature_spec()
        unknown = self.ablations - set(ABLATIONS)
        if unknown:
            raise ConfigError(f"Unknown ablation flag(s) {sorted(unknown)}; expected {list(ABLATIONS)}")
        codes = {c.strip().lower() for c in self.modalities.split(",") if c.strip()}
        if not codes or not codes <= set(MODALITY_CODES):
            raise ConfigError(f"modalities must be a non-empty subset of t,a,v - got '{self.modalities}'")
        if self.d < 2 or self.d % 2:
            raise ConfigError(f"d={self.d} must be an even integer >= 2 (two LSTM directions)")
        if self.heads < 1 or self.d % self.heads:
            raise ConfigError(f"heads={self.heads} must divide d={self.d}")
        if not 1 <= self.bottleneck < self.d:
            raise ConfigError(f"d_b={self.bottleneck} must lie in [1, d)")
        if not 1 <= self.window <= 4:
            raise ConfigError(f"window={self.window} outside [1, 4]")
        if self.mpt_layers < 1 or self.rgcn_layers < 1:
            raise ConfigError("mpt_layers and rgcn_layers must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout={self.dropout} outside [0, 1)")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be non-negative")
        if self.tau <= 0:
            raise ConfigError(f"tau={self.tau} must be positive")
        if self.epochs < 1 or self.batch_size < 1 or self.workers < 1:
            raise ConfigError("epochs, batch_size and workers must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction={self.val_fraction} outside [0, 1)")
        if self.patience < 0:
            raise ConfigError("patience must be >= 0")
        return self

    def with_overrides(self, **changes) -> "RunConfig":
        return replace(self, **{k: v for k, v in changes.items() if v is not None}).validate()

    def to_text(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for line_no, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{line_no}: expected 'key = value', got '{raw.strip()}'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"{source}:{line_no}: unknown key '{key}'")
            values[key] = _coerce(types[key], value, f"{source}:{line_no}")
        return cls(**values).validate()

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"Config file not found: {path}")
        config = cls.from_text(path.read_text(encoding="utf-8"), source=str(path))
        logger.debug("Loaded run config from %s", path)
        return config


def _coerce(kind, value: str, where: str):
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "bool":
            lowered = value.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return lowered in ("true", "1", "yes")
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"{where}: cannot read '{value}' as {kind}") from None

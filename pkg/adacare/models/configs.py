# adacare/models/configs.py
"""Typed configuration: model architecture, training, synthetic cohorts, and the run file."""
import hashlib
import json
import logging
from enum import Enum
from pathlib import Path
from typing import Literal, Optional

from pydantic import (BaseModel, ConfigDict, Field, NonNegativeFloat, NonNegativeInt,
                      PositiveFloat, PositiveInt, ValidationError, field_validator,
                      model_validator)

from adacare.errors import ConfigError
from config import MODEL_PRESETS, Config

logger = logging.getLogger(__name__)


class Variant(str, Enum):
    """Ablation rows: which paths of the network are switched on."""
    GRU = "gru"
    RAW_SIGMOID = "raw_sigmoid"
    CONV = "conv"
    CONV_SPARSEMAX = "conv_sparsemax"
    CONV_SIGMOID = "conv_sigmoid"


# variant -> (use_conv, use_raw_recal, raw_activation)
VARIANT_SWITCHES = {
    Variant.GRU: (False, False, "sigmoid"),
    Variant.RAW_SIGMOID: (False, True, "sigmoid"),
    Variant.CONV: (True, False, "sigmoid"),
    Variant.CONV_SPARSEMAX: (True, True, "sparsemax"),
    Variant.CONV_SIGMOID: (True, True, "sigmoid"),
}


class ModelConfig(BaseModel):
    """Architecture and regularization hyperparameters of one network."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    preset: Optional[str] = None
    variant: Optional[Variant] = None
    n_features: Optional[PositiveInt] = None
    hidden_units: PositiveInt = 64
    conv_filters: PositiveInt = 64
    kernel_size: PositiveInt = 2
    dilation_rates: tuple[PositiveInt, ...] = (1, 2, 3)
    compress_ratio: PositiveInt = 2
    raw_activation: Literal["sigmoid", "sparsemax"] = "sigmoid"
    use_conv: bool = True
    use_raw_recal: bool = True
    dropout: float = Field(default=0.5, ge=0.0, lt=1.0)
    max_seq_len: PositiveInt = Config.MAX_SEQUENCE_LENGTH

    @model_validator(mode="before")
    @classmethod
    def _expand_preset_and_variant(cls, data):
        if not isinstance(data, dict):
            return data
        data = dict(data)
        preset = data.get("preset")
        if preset is not None:
            if preset not in MODEL_PRESETS:
                raise ValueError(f"unknown preset '{preset}' (choose from {sorted(MODEL_PRESETS)})")
            data = {**MODEL_PRESETS[preset], **data}
        variant = data.get("variant")
        if variant is not None:
            use_conv, use_raw, activation = VARIANT_SWITCHES[Variant(variant)]
            for key, value in (("use_conv", use_conv), ("use_raw_recal", use_raw),
                               ("raw_activation", activation)):
                if key in data and data[key] != value:
                    raise ValueError(f"{key}={data[key]!r} contradicts variant '{Variant(variant).value}'")
                data[key] = value
        return data

    @field_validator("dilation_rates")
    @classmethod
    def _rates_strictly_increasing(cls, rates):
        if not rates:
            raise ValueError("at least one dilation rate is required")
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise ValueError(f"dilation rates must be strictly increasing, got {list(rates)}")
        return rates

    @classmethod
    def for_variant(cls, variant, **overrides):
        return cls(variant=variant, **overrides)

    def updated(self, **changes):
        """Validated copy with ``changes`` applied."""
        data = self.model_dump(exclude={"preset", "variant"})
        data.update(changes)
        return ModelConfig(**data)

    def as_variant(self, variant):
        """Same hyperparameters with the switches of an ablation variant."""
        data = self.model_dump(exclude={"preset", "variant", "use_conv", "use_raw_recal", "raw_activation"})
        return ModelConfig(variant=variant, **data)

    def with_features(self, n_features):
        return self if self.n_features == n_features else self.updated(n_features=n_features)

    def require_features(self):
        if self.n_features is None:
            raise ConfigError("n_features must be set before building a network", key="model.n_features")
        return self.n_features

    @property
    def n_rates(self):
        return len(self.dilation_rates)

    @property
    def conv_width(self):
        return self.n_rates * self.conv_filters if self.use_conv else 0

    @property
    def visit_width(self):
        return self.require_features() + self.conv_width

    @property
    def variant_name(self):
        switches = (self.use_conv, self.use_raw_recal, self.raw_activation)
        for variant, expected in VARIANT_SWITCHES.items():
            if variant is Variant.GRU or variant is Variant.CONV:
                # raw activation is irrelevant when raw recalibration is off
                if switches[:2] == expected[:2]:
                    return variant.value
            elif switches == expected:
                return variant.value
        return "custom"

    def fingerprint(self):
        """Stable hash of the architecture, for artifact provenance."""
        payload = json.dumps(self.model_dump(mode="json", exclude={"preset", "variant"}), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


class TrainConfig(BaseModel):
    """Optimizer and training-loop settings."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    learning_rate: PositiveFloat = 1e-3
    batch_size: PositiveInt = 128
    max_epochs: PositiveInt = 30
    patience: PositiveInt = 5
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    epsilon: PositiveFloat = 1e-8
    seed: int = 0
    threads: PositiveInt = 1


class SynthSpec(BaseModel):
    """Synthetic EMR cohort with planted chronic-trend and acute-spike risk signals."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_patients: PositiveInt = 1000
    min_visits: PositiveInt = 20
    max_visits: PositiveInt = 60
    n_features: PositiveInt = 20
    seed: int = 0
    trend_feature: NonNegativeInt = 0
    trend_rate: NonNegativeFloat = 0.08
    trend_risk: float = 1.0
    spike_feature: NonNegativeInt = 1
    spike_window: PositiveInt = 3
    spike_duration: PositiveInt = 2
    spike_magnitude: float = 3.0
    spike_risk: float = 4.0
    noise_std: NonNegativeFloat = 1.0
    prevalence: float = Field(default=0.1, gt=0.0, lt=1.0)
    chronic_frac: float = Field(default=0.35, ge=0.0, le=1.0)
    acute_frac: float = Field(default=0.35, ge=0.0, le=1.0)
    feature_names: Optional[tuple[str, ...]] = None

    @model_validator(mode="after")
    def _check_consistency(self):
        if self.trend_feature >= self.n_features:
            raise ValueError(f"trend_feature {self.trend_feature} is out of range for {self.n_features} features")
        if self.spike_feature >= self.n_features:
            raise ValueError(f"spike_feature {self.spike_feature} is out of range for {self.n_features} features")
        if self.min_visits > self.max_visits:
            raise ValueError(f"min_visits {self.min_visits} exceeds max_visits {self.max_visits}")
        if self.chronic_frac + self.acute_frac > 1.0 + 1e-12:
            raise ValueError("chronic_frac + acute_frac must not exceed 1")
        if self.feature_names is not None and len(self.feature_names) != self.n_features:
            raise ValueError(f"feature_names has {len(self.feature_names)} entries, expected {self.n_features}")
        return self

    @classmethod
    def preset(cls, name, **overrides):
        """Named cohorts: 'mixed' (both signals), 'trend' (chronic only), 'spike' (acute only)."""
        presets = {
            "mixed": {},
            "trend": {"chronic_frac": 0.5, "acute_frac": 0.0, "spike_risk": 0.0},
            "spike": {"chronic_frac": 0.0, "acute_frac": 0.5, "trend_risk": 0.0},
        }
        if name not in presets:
            raise ConfigError(f"unknown cohort '{name}' (choose from {sorted(presets)})", key="cohort")
        return cls(**{**presets[name], **overrides})

    def names(self):
        if self.feature_names is not None:
            return list(self.feature_names)
        return [f"f{i:02d}" for i in range(self.n_features)]


# ---------------------------------------------------------------------------
# Run file sections
# ---------------------------------------------------------------------------

class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DataSection(_Section):
    records: Optional[str] = None
    labels: Optional[str] = None
    groups: Optional[str] = None
    max_len: PositiveInt = Config.MAX_SEQUENCE_LENGTH
    split: tuple[PositiveFloat, PositiveFloat, PositiveFloat] = Config.SPLIT_FRACTIONS
    min_observed_frac: Optional[float] = Field(default=None, ge=0.0, lt=1.0)
    folds: int = Field(default=10, ge=2)

    @field_validator("split")
    @classmethod
    def _fractions_sum_to_one(cls, split):
        if abs(sum(split) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(split)}")
        return split


class EvalSection(_Section):
    n_bootstrap: PositiveInt = Config.BOOTSTRAP_RESAMPLES
    write_curves: bool = True
    split: Literal["valid", "test"] = "test"


class ExplainSection(_Section):
    split: Literal["train", "valid", "test"] = "valid"
    average: Literal["visit", "patient"] = "visit"


class GradcheckSection(_Section):
    model: ModelConfig = Field(default_factory=lambda: ModelConfig(preset="tiny"))
    n_patients: PositiveInt = 2
    seq_len: PositiveInt = 5
    eps: PositiveFloat = 1e-5
    n_seeds: PositiveInt = 10
    tolerance: PositiveFloat = Config.GRADCHECK_TOLERANCE


class AblationSection(_Section):
    cohort: Literal["mixed", "trend", "spike"] = "mixed"
    variants: tuple[Variant, ...] = (Variant.GRU, Variant.CONV, Variant.CONV_SIGMOID)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    n_patients: PositiveInt = 2000


class RunConfig(_Section):
    """Everything one CLI invocation needs, read from a JSON file plus overrides."""
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    synth: SynthSpec = Field(default_factory=SynthSpec)
    data: DataSection = Field(default_factory=DataSection)
    eval: EvalSection = Field(default_factory=EvalSection)
    explain: ExplainSection = Field(default_factory=ExplainSection)
    gradcheck: GradcheckSection = Field(default_factory=GradcheckSection)
    ablation: AblationSection = Field(default_factory=AblationSection)
    out_dir: str = "runs/default"
    params_file: Optional[str] = None
    seed: NonNegativeInt = 0
    threads: PositiveInt = 1

    @model_validator(mode="after")
    def _sequences_fit_the_model(self):
        if self.data.max_len > self.model.max_seq_len:
            raise ConfigError(f"{self.data.max_len} exceeds model.max_seq_len={self.model.max_seq_len}; "
                              f"truncated patients would not fit the network", key="data.max_len")
        return self

    @property
    def out_path(self):
        return Path(self.out_dir)

    @property
    def params_path(self):
        return Path(self.params_file) if self.params_file else self.out_path / "params.bin"

    def train_config(self):
        """Training settings bound to the run's root seed and thread count."""
        return self.train.model_copy(update={"seed": self.seed, "threads": self.threads})

    @classmethod
    def load(cls, path=None, overrides=(), **top_level):
        """
        Build a validated run configuration.

        Args:
            path: Optional JSON file
            overrides: Iterable of ``dotted.key=value`` strings (values parsed as JSON)
            **top_level: Top-level keys from command-line flags; ``None`` values are ignored

        Raises:
            ConfigError: On unreadable files, malformed overrides, or validation failures
        """
        raw = {}
        if path is not None:
            try:
                raw = json.loads(Path(path).read_text(encoding="utf-8"))
            except FileNotFoundError:
                raise ConfigError(f"config file not found: {path}", key="--config")
            except json.JSONDecodeError as e:
                raise ConfigError(f"config file is not valid JSON ({e})", key="--config")
            if not isinstance(raw, dict):
                raise ConfigError("config file must contain a JSON object", key="--config")

        for item in overrides:
            key, value = parse_override(item)
            set_dotted(raw, key, value)

        for key, value in top_level.items():
            if value is not None:
                raw[key] = value

        try:
            return cls.model_validate(raw)
        except ValidationError as e:
            raise config_error_from(e)


def parse_override(item):
    """Split ``key=value``; the value is JSON when it parses, a plain string otherwise."""
    if "=" not in item:
        raise ConfigError(f"override '{item}' is not of the form key=value", key=item)
    key, text = item.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override '{item}' has an empty key", key=item)
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    return key, value


def set_dotted(target, dotted_key, value):
    node = target
    parts = dotted_key.split(".")
    for part in parts[:-1]:
        child = node.get(part)
        if child is None:
            child = node[part] = {}
        elif not isinstance(child, dict):
            raise ConfigError(f"cannot set '{dotted_key}': '{part}' is not a section", key=dotted_key)
        node = child
    node[parts[-1]] = value


def config_error_from(error):
    """Turn a pydantic ValidationError into a ConfigError naming the first bad key."""
    first = error.errors()[0]
    cause = first.get("ctx", {}).get("error")
    if isinstance(cause, ConfigError):
        return cause
    key = ".".join(str(part) for part in first.get("loc", ())) or None
    return ConfigError(first.get("msg", str(error)), key=key)

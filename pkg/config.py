"""
Run Configuration Module (config.py)

One RunConfig per invocation, merged from (lowest to highest precedence):

    1. dataclass defaults
    2. a JSON config file (--config run.json), same nesting as RunConfig.to_dict()
    3. environment variables SHARK_<SECTION>__<FIELD>, e.g. SHARK_STORE__T8=500
    4. --set section.field=value overrides and dedicated command-line flags

Top-level fields use the section name only: SHARK_SEED=7, --set seed=7.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from typing import Any, Dict, Iterable, List, Mapping, Optional

from errors import ConfigurationError
from model import ModelConfig
from quantizer import RoundingMode, ScalePolicy
from selection import PruneConfig
from store import DEFAULT_T16, DEFAULT_T8

# Configure logging
logger = logging.getLogger(__name__)
if not logger.handlers:
    handler = logging.StreamHandler()
    formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(module)s - %(message)s')
    handler.setFormatter(formatter)
    logger.addHandler(handler)
    logger.setLevel(os.environ.get("LOG_LEVEL", "INFO").upper())
    logger.propagate = False

ENV_PREFIX = "SHARK_"
ENV_SEPARATOR = "__"
# environment variables with the prefix that are not configuration fields
RESERVED_ENV = {"SHARK_DATABASE_URL", "SHARK_ACCEPTANCE"}


@dataclass
class DatasetSettings:
    n_samples: int = 20000
    n_fields: int = 20
    cardinality: int = 100
    # overrides `cardinality` field by field when given
    cardinalities: Optional[List[int]] = None
    n_informative: int = 10
    zipf_exponent: float = 1.0
    test_fraction: float = 0.2

    def resolved_cardinalities(self) -> List[int]:
        return list(self.cardinalities) if self.cardinalities else [self.cardinality] * self.n_fields


@dataclass
class QuantizerSettings:
    scale_policy: str = ScalePolicy.SYMMETRIC.value
    rounding: str = RoundingMode.STOCHASTIC


@dataclass
class PrioritySettings:
    alpha: float = 2.0
    beta: float = 0.99
    decay_untouched: bool = False


@dataclass
class StoreSettings:
    t8: float = DEFAULT_T8
    t16: float = DEFAULT_T16
    include_scores: bool = True


@dataclass
class TrainSettings:
    epochs: int = 3
    batch_size: int = 512
    retier_every: int = 100


@dataclass
class RunConfig:
    dataset: DatasetSettings = field(default_factory=DatasetSettings)
    model: ModelConfig = field(default_factory=ModelConfig)
    quantizer: QuantizerSettings = field(default_factory=QuantizerSettings)
    priority: PrioritySettings = field(default_factory=PrioritySettings)
    store: StoreSettings = field(default_factory=StoreSettings)
    selection: PruneConfig = field(default_factory=PruneConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    seed: int = 0
    single_thread: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def rounding_mode(self, offset: int = 0) -> RoundingMode:
        return RoundingMode(self.quantizer.rounding, seed=self.seed + offset)

    def scale_policy(self) -> ScalePolicy:
        return ScalePolicy(self.quantizer.scale_policy)

    def validate(self) -> "RunConfig":
        d = self.dataset
        if d.n_samples < 1 or d.n_fields < 1:
            raise ConfigurationError("dataset.n_samples and dataset.n_fields must be >= 1")
        if d.cardinalities is not None and len(d.cardinalities) != d.n_fields:
            raise ConfigurationError(
                f"dataset.cardinalities has {len(d.cardinalities)} entries for {d.n_fields} fields")
        if any(c < 2 for c in d.resolved_cardinalities()):
            raise ConfigurationError("every cardinality must be >= 2")
        if not 0 <= d.n_informative <= d.n_fields:
            raise ConfigurationError("dataset.n_informative must lie in [0, n_fields]")
        if d.zipf_exponent < 0:
            raise ConfigurationError("dataset.zipf_exponent must be >= 0")
        if not 0 < d.test_fraction < 1:
            raise ConfigurationError("dataset.test_fraction must lie in (0, 1)")
        self.model.validate()
        try:
            self.scale_policy()
            RoundingMode(self.quantizer.rounding)
        except ValueError as e:
            raise ConfigurationError(f"quantizer: {e}") from e
        if self.priority.alpha <= 0 or not 0 < self.priority.beta < 1:
            raise ConfigurationError("priority.alpha must be > 0 and priority.beta must lie in (0, 1)")
        if self.store.t8 > self.store.t16:
            raise ConfigurationError(f"store.t8 ({self.store.t8}) must not exceed store.t16 ({self.store.t16})")
        if self.store.t8 < 0:
            raise ConfigurationError("store thresholds must be non-negative")
        self.selection.validate()
        if self.train.epochs < 0 or self.train.batch_size < 1 or self.train.retier_every < 1:
            raise ConfigurationError("train.epochs >= 0, train.batch_size >= 1 and train.retier_every >= 1 required")
        return self


# --- Value coercion ---
def _parse_bool(raw: str) -> bool:
    value = raw.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"'{raw}' is not a boolean")


def _coerce(raw: Any, current: Any, name: str) -> Any:
    """Convert a raw override (string from env / --set, or a JSON value) to the field's type."""
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(current, bool):
            return _parse_bool(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, list) or current is None:
            if raw.strip().lower() in ("none", "null", ""):
                return None
            try:
                parsed = json.loads(raw)
                return [parsed] if isinstance(current, list) and isinstance(parsed, (int, float)) else parsed
            except json.JSONDecodeError:
                if "," in raw:
                    return [int(x) for x in raw.split(",") if x.strip()]
                return raw
    except ValueError as e:
        raise ConfigurationError(f"Invalid value '{raw}' for {name}: {e}") from e
    return raw


def _section(config: RunConfig, name: str):
    if not hasattr(config, name):
        raise ConfigurationError(f"Unknown configuration section '{name}'")
    return getattr(config, name)


def set_value(config: RunConfig, dotted: str, raw: Any) -> None:
    parts = dotted.strip().lower().split(".")
    if len(parts) == 1:
        key = parts[0]
        if key not in {f.name for f in fields(RunConfig)} or is_dataclass(getattr(config, key, None)):
            raise ConfigurationError(f"Unknown top-level setting '{dotted}'")
        setattr(config, key, _coerce(raw, getattr(config, key), dotted))
        return
    if len(parts) != 2:
        raise ConfigurationError(f"Setting '{dotted}' must look like section.field")
    section = _section(config, parts[0])
    if not is_dataclass(section) or parts[1] not in {f.name for f in fields(section)}:
        raise ConfigurationError(f"Unknown setting '{dotted}'")
    setattr(section, parts[1], _coerce(raw, getattr(section, parts[1]), dotted))


def apply_mapping(config: RunConfig, data: Mapping[str, Any]) -> RunConfig:
    for key, value in data.items():
        if isinstance(value, Mapping):
            for sub_key, sub_value in value.items():
                set_value(config, f"{key}.{sub_key}", sub_value)
        else:
            set_value(config, key, value)
    return config


def apply_env(config: RunConfig, environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    environ = os.environ if environ is None else environ
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX) or name in RESERVED_ENV:
            continue
        dotted = name[len(ENV_PREFIX):].lower().replace(ENV_SEPARATOR, ".")
        set_value(config, dotted, raw)
        logger.debug(f"Config override from environment: {dotted}={raw}")
    return config


def apply_overrides(config: RunConfig, overrides: Iterable[str]) -> RunConfig:
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"Override '{item}' must look like section.field=value")
        dotted, raw = item.split("=", 1)
        set_value(config, dotted, raw)
    return config


def load_config(path: Optional[str] = None, overrides: Iterable[str] = (),
                environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    config = RunConfig()
    if path:
        try:
            with open(path, "r") as f:
                data = json.load(f)
        except FileNotFoundError as e:
            raise ConfigurationError(f"Config file '{path}' not found") from e
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"Config file '{path}' is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigurationError(f"Config file '{path}' must hold a JSON object")
        apply_mapping(config, data)
        logger.info(f"Loaded configuration from {path}")
    apply_env(config, environ)
    apply_overrides(config, overrides)
    return config.validate()

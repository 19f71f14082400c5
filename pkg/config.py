import hashlib
import json
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from errors import ConfigError

load_dotenv()


class Settings(BaseSettings):
    """Process-level settings read from the environment / .env"""

    # Logging
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")

    # Data & outputs
    SEA_DATA_ROOT: Optional[str] = os.getenv("SEA_DATA_ROOT") or None
    SEA_RUNS_DIR: str = os.getenv("SEA_RUNS_DIR", "runs")

    # Compute
    SEA_DEVICE: str = os.getenv("SEA_DEVICE", "cpu")

    model_config = SettingsConfigDict(env_file=".env", case_sensitive=True, extra="ignore")


# Initialize settings
settings = Settings()

# Setup logger AFTER settings are initialized
from logger import setup_logger  # noqa: E402

logger = setup_logger(__name__, settings.LOG_LEVEL)


# ==================== Run-file sections ====================

class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


DEFAULT_TEMPLATE = "I will [action] [object]"

CAPTION_STYLES = [
    "I will [action] [object]",
    "I'm going to [action] [object]",
    "I will [action] the [object] now",
    "Next I plan to [action] [object]",
]


class SyntheticConfig(_Section):
    n_actions: int = Field(4, description="Number of action classes (anchor positions)")
    n_objects: int = Field(4, description="Number of object classes (rendered shapes)")
    samples_per_pair: int = Field(5, description="Egocentric images per (action, object) pair and split")
    image_size: Tuple[int, int] = Field((64, 64), description="(h, w) of rendered images")
    k_exo: int = Field(3, description="Exocentric images rendered per (action, object) pair")
    seed: int = 7
    blob_sigma: float = Field(4.0, description="Std-dev in pixels of the GT Gaussian blob")
    setting: Literal["seen", "unseen"] = "seen"
    n_unseen_objects: int = Field(1, description="Objects held out of training in the unseen setting")


class DataConfig(_Section):
    root: Optional[str] = None
    num_workers: int = 0
    hflip: bool = False
    synthetic: SyntheticConfig = Field(default_factory=SyntheticConfig)


class EncoderBranch(_Section):
    kind: Literal["toy", "pretrained"] = "toy"
    dim: int = 64
    weights: Optional[str] = Field(None, description="Local weight directory for pretrained kinds")
    seed: int = 0


class EncoderConfig(_Section):
    patch: int = 16
    image_size: int = 224
    pure: EncoderBranch = Field(default_factory=EncoderBranch)
    multimodal: EncoderBranch = Field(default_factory=EncoderBranch)
    text: EncoderBranch = Field(default_factory=EncoderBranch)

    @model_validator(mode="after")
    def _shared_text_space(self):
        if self.text.dim != self.multimodal.dim:
            raise ValueError(
                f"encoder.text.dim ({self.text.dim}) must equal encoder.multimodal.dim ({self.multimodal.dim})"
            )
        return self


class PFFConfig(_Section):
    layers: int = 2
    heads: int = 4
    model_dim: int = 64
    ffn_dim: int = 256
    dropout: float = 0.0

    @model_validator(mode="after")
    def _heads_divide(self):
        if self.model_dim % self.heads != 0:
            raise ValueError(f"model.pff.model_dim ({self.model_dim}) not divisible by heads ({self.heads})")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("model.pff.dropout must lie in [0, 1)")
        return self


class ExplainConfig(_Section):
    variant: Literal["ffn_softmax", "concat_avgpool", "transformer"] = "transformer"
    heads: int = 4
    ffn_mult: int = 4
    dropout: float = 0.0


class ModelConfig(_Section):
    pff: PFFConfig = Field(default_factory=PFFConfig)
    explain: ExplainConfig = Field(default_factory=ExplainConfig)


class LossWeights(_Section):
    cos: float = Field(1.0, ge=0.0)
    con: float = Field(1.0, ge=0.0)
    ce_action: float = Field(1.0, ge=0.0)
    ce_object: float = Field(1.0, ge=0.0)

    def all_zero(self) -> bool:
        return max(self.cos, self.con, self.ce_action, self.ce_object) <= 0.0


class LossConfig(_Section):
    alpha: float = Field(0.1, ge=0.0, le=1.0, description="Domain-gap margin")
    eps: float = Field(1e-8, gt=0.0)
    tau: float = Field(0.07, gt=0.0, description="Contrastive temperature")
    contrastive_include_exo: bool = False
    contrastive_pooling: Literal["per_prompt", "own_prompt"] = Field(
        "per_prompt",
        description="per_prompt: each image is pooled under every batch prompt's heatmap; "
                    "own_prompt: one pooled embedding per image, from its own prompt",
    )
    weights: LossWeights = Field(default_factory=LossWeights)


class AffordanceConfig(_Section):
    beta: float = Field(0.5, ge=0.0, lt=1.0)
    epsilon_norm: float = Field(1e-12, gt=0.0)
    upsample: Literal["bilinear"] = "bilinear"
    prompt_style: Literal["pair", "template"] = "pair"
    teacher_forcing: bool = True
    aligner: Literal["centered_linear", "identity"] = Field(
        "centered_linear", description="Learned map from fused multimodal features into the text space"
    )


class TrainConfig(_Section):
    batch_size: int = Field(16, gt=0)
    epochs: int = Field(20, ge=0)
    lr: float = Field(1e-3, gt=0.0)
    weight_decay: float = Field(5e-4, ge=0.0)
    momentum: float = Field(0.9, ge=0.0)
    schedule: Literal["constant", "cosine"] = "constant"
    grad_clip: Optional[float] = None
    seed: int = 0
    setting: Literal["seen", "unseen"] = "seen"
    k_exo: int = Field(3, gt=0)
    # validated by the trainer so a zero surfaces as a ConfigError at fit time
    eval_every: int = 1
    log_every: int = Field(1, gt=0)


class CaptionConfig(_Section):
    template: str = DEFAULT_TEMPLATE
    styles: List[str] = Field(default_factory=lambda: list(CAPTION_STYLES))


class MetricsConfig(_Section):
    epsilon: float = Field(1e-12, gt=0.0)
    topk: List[int] = Field(default_factory=lambda: [1, 5])


class RunConfig(_Section):
    """Everything a run needs, one namespace per pipeline stage"""

    data: DataConfig = Field(default_factory=DataConfig)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    affordance: AffordanceConfig = Field(default_factory=AffordanceConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    caption: CaptionConfig = Field(default_factory=CaptionConfig)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)


# ==================== Loading ====================

def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Apply `dotted.key=value` overrides onto a nested dict (in place)"""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"Override must look like key=value, got '{item}'")
        key, raw = item.split("=", 1)
        parts = [p for p in key.strip().split(".") if p]
        if not parts:
            raise ConfigError(f"Empty override key in '{item}'")
        node = data
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"Override '{key}' descends into non-section '{part}'")
            node = child
        node[parts[-1]] = _parse_value(raw)
    return data


def read_config_file(path: Path) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        if path.suffix.lower() == ".toml":
            with open(path, "rb") as fh:
                return tomllib.load(fh)
        if path.suffix.lower() == ".json":
            return json.loads(path.read_text(encoding="utf-8"))
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"Could not parse {path}: {e}") from e
    raise ConfigError(f"Unsupported config format '{path.suffix}' (use .toml or .json)")


def build_run_config(data: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid run configuration:\n{e}") from e


def load_run_config(path: Optional[Path] = None, overrides: Sequence[str] = ()) -> RunConfig:
    """Read a TOML/JSON run file (optional), apply overrides, validate"""
    data = read_config_file(path) if path is not None else {}
    apply_overrides(data, overrides)
    cfg = build_run_config(data)
    logger.info(f"Run config loaded (hash={config_hash(cfg)}) from {path or 'defaults'}")
    return cfg


def resolve_data_root(cfg: RunConfig) -> Path:
    root = cfg.data.root or settings.SEA_DATA_ROOT
    if not root:
        raise ConfigError("data.root is not set and SEA_DATA_ROOT is empty")
    return Path(root)


def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:10]

"""Configuration management with profile-aware loading and validated run configs."""

import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from utils.phantoms import PhantomConfig

from .attention import AttnConfig
from .autoencoder import AEConfig
from .detector import DetectorConfig
from .exceptions import ConfigError, ConfigValidationError
from .masks import MaskSpec

DEFAULT_PROFILE = "desk"
ABLATION_ARMS = ("baseline", "lit", "attention", "replica", "translated_only")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Section):
    n_normal: int = Field(default=24, ge=0)
    n_tumor: int = Field(default=16, ge=0)
    splits: Tuple[float, float, float] = (0.6, 0.2, 0.2)
    workers: int = Field(default=1, ge=1)
    phantom: PhantomConfig = PhantomConfig()

    @field_validator("splits")
    @classmethod
    def _sums_to_one(cls, value: Tuple[float, float, float]) -> Tuple[float, float, float]:
        if any(v < 0 for v in value) or abs(sum(value) - 1.0) > 1e-9:
            raise ValueError(f"splits {value} must be non-negative and sum to 1")
        return value


class TranslationConfig(_Section):
    mask: MaskSpec = MaskSpec()
    lambda_max: float = Field(default=0.6, ge=0.0, lt=1.0)
    # explicit per-layer weights; empty means the linear schedule
    schedule: List[float] = []
    per_tumor: int = Field(default=1, ge=1)
    workers: int = Field(default=1, ge=1)


class GradcheckConfig(_Section):
    eps: float = Field(default=1e-5, gt=0.0)
    tolerance: float = Field(default=1e-4, gt=0.0)
    max_coords: int = Field(default=24, ge=1)
    image_size: Tuple[int, int] = (80, 64)
    seed: int = 0


class AblationConfig(_Section):
    seeds: List[int] = [0, 1, 2]
    arms: List[str] = list(ABLATION_ARMS)
    depths: List[int] = []

    @field_validator("arms")
    @classmethod
    def _known_arms(cls, value: List[str]) -> List[str]:
        unknown = sorted(set(value) - set(ABLATION_ARMS))
        if unknown:
            raise ValueError(f"unknown ablation arms {unknown}; choose from {list(ABLATION_ARMS)}")
        return value


class LoggingConfig(_Section):
    level: str = "INFO"
    file: bool = False
    # stages running longer are logged as warnings
    stage_warn_seconds: Optional[float] = Field(default=None, gt=0.0)


class RunConfig(_Section):
    """Validated configuration of a pipeline run."""

    seed: int = 0
    output_dir: Path = Path("runs/desk")
    data: DataConfig = DataConfig()
    ae: AEConfig = AEConfig()
    translation: TranslationConfig = TranslationConfig()
    attention: AttnConfig = AttnConfig()
    detector: DetectorConfig = DetectorConfig()
    gradcheck: GradcheckConfig = GradcheckConfig()
    ablation: AblationConfig = AblationConfig()
    logging: LoggingConfig = LoggingConfig()


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


class ConfigManager:
    """Loads ``config/<profile>.yaml`` for the profile named by ``REPLICA_PROFILE``."""

    def __init__(self, profile: Optional[str] = None, config_dir: Optional[Union[str, Path]] = None):
        self._config: Optional[Dict[str, Any]] = None
        self._profile = (profile or os.getenv('REPLICA_PROFILE', DEFAULT_PROFILE)).lower()
        self._config_dir = Path(config_dir) if config_dir else Path(__file__).parent.parent / "config"

    @property
    def profile(self) -> str:
        return self._profile

    def load_config(self) -> Dict[str, Any]:
        """Load configuration for the current profile."""
        if self._config is None:
            config_file = self._config_dir / f"{self._profile}.yaml"
            if not config_file.exists():
                if self._profile != DEFAULT_PROFILE:
                    raise ConfigError(
                        f"unknown profile {self._profile!r}: {config_file} does not exist",
                        error_code="UNKNOWN_PROFILE",
                    )
                self._config = self._get_default_config()
            else:
                self._config = self._substitute_env_vars(self._read(config_file))
        return self._config

    def _read(self, path: Path) -> Dict[str, Any]:
        try:
            with open(path, 'r', encoding='utf-8') as f:
                loaded = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: not valid YAML/JSON ({e})", error_code="BAD_SYNTAX") from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping", error_code="BAD_SYNTAX")
        return loaded

    def _substitute_env_vars(self, config: Any) -> Any:
        """Substitute ``${VAR}`` and ``${VAR:-default}`` strings."""
        if isinstance(config, dict):
            return {k: self._substitute_env_vars(v) for k, v in config.items()}
        if isinstance(config, list):
            return [self._substitute_env_vars(v) for v in config]
        if isinstance(config, str) and config.startswith('${') and config.endswith('}'):
            var_expr = config[2:-1]
            if ':-' in var_expr:
                var_name, default_value = var_expr.split(':-', 1)
                return os.getenv(var_name, default_value)
            return os.getenv(var_expr, config)
        return config

    def _get_default_config(self) -> Dict[str, Any]:
        return RunConfig().model_dump(mode="json")

    def get(self, key_path: str, default: Any = None) -> Any:
        """Get configuration value by dot-separated key path."""
        value = self.load_config()
        for key in key_path.split('.'):
            if isinstance(value, dict) and key in value:
                value = value[key]
            else:
                return default
        return value

    def load_run_config(self, path: Optional[Union[str, Path]] = None) -> RunConfig:
        """Merge an optional user file over the profile and validate it.

        Relative ``output_dir`` values resolve against the user file's directory.
        ``REPLICA_OUTPUT_DIR`` overrides the output directory in every case.
        """
        raw = self.load_config()
        base_dir = Path.cwd()
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise ConfigError(f"config file {path} does not exist", error_code="NOT_FOUND")
            raw = deep_merge(raw, self._substitute_env_vars(self._read(path)))
            base_dir = path.resolve().parent
        try:
            config = RunConfig.model_validate(raw)
        except ValidationError as e:
            problems = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
            raise ConfigValidationError(
                f"invalid configuration: {problems}",
                error_code="SCHEMA",
                details={"errors": e.errors(include_url=False)},
            ) from e

        output_dir = Path(os.getenv("REPLICA_OUTPUT_DIR") or config.output_dir)
        if not output_dir.is_absolute():
            output_dir = base_dir / output_dir
        return config.model_copy(update={"output_dir": output_dir})


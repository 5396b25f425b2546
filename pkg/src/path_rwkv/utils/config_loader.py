"""
Load run configuration: packaged defaults, user YAML file, environment and CLI overrides.
"""
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml

from path_rwkv.utils.errors import ConfigError

try:
    from ruamel.yaml import YAML
    HAS_RUAMEL = True
except ImportError:
    HAS_RUAMEL = False

ENV_PREFIX = "PATHRWKV_"


def get_package_root() -> Path:
    """
    Return the absolute path of the installed `path_rwkv` package.
    """
    return Path(__file__).resolve().parents[1]


def default_settings_path() -> Path:
    return get_package_root() / "config" / "settings.yaml"


def _plain(value: Any) -> Any:
    """Convert ruamel containers into plain dicts/lists."""
    if isinstance(value, Mapping):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def load_settings(path: Optional[str] = None) -> dict:
    """
    Load a YAML settings file into a plain dictionary.

    Uses ruamel.yaml (YAML 1.2 rules) if available,
    otherwise falls back to yaml.safe_load.

    Args:
        path: Settings file; defaults to the packaged settings.yaml

    Raises:
        ConfigError: If the file is missing or is not a mapping
    """
    full_path = Path(path) if path else default_settings_path()
    if not full_path.exists():
        raise ConfigError(f"Settings file not found: {full_path}")

    with open(full_path, "r", encoding="utf-8") as f:
        if HAS_RUAMEL:
            data = YAML(typ="safe").load(f)
        else:
            data = yaml.safe_load(f)

    data = _plain(data) if data is not None else {}
    if not isinstance(data, dict):
        raise ConfigError(f"Settings file {full_path} must contain a key/value mapping")
    return data


@dataclass
class RunConfig:
    """
    Flat run configuration shared by all CLI subcommands.

    Defaults mirror config/settings.yaml; `from_mapping` rejects unknown keys.
    """

    # general
    seed: int = 0
    precision: str = "float32"
    workers: int = 1
    force: bool = False
    log_level: str = "INFO"
    log_file: str = ""
    out_dir: str = "runs"
    # dataset generation
    data_dir: str = "data/synthetic"
    n_slides: int = 200
    grid_w: int = 48
    grid_h: int = 48
    tile_px: int = 16
    witness_rate: float = 0.05
    positive_fraction: float = 0.5
    noise_sigma: float = 0.05
    label_missing_rate: float = 0.0
    coverage_thresh: float = 0.5
    var_thresh: float = 0.01
    in_dim: int = 384
    embedder_seed: int = 1234
    tasks: list = field(default_factory=lambda: ["neoplasia", "tier", "fraction", "opacity"])
    # model
    depth: int = 2
    embed_dim: int = 128
    n_heads: int = 0
    lora_rank: int = 32
    decay_rank: int = 64
    channel_mix_ratio: float = 3.5
    use_pe: bool = True
    mtl_design: str = "ours"
    # training
    epochs: int = 100
    warmup_epochs: int = 20
    base_lr: float = 1e-4
    floor_factor: float = 0.01
    batch_size: int = 4
    max_n_tiles: int = 2000
    sampling: str = "random"
    z_order_mode: str = "contiguous"
    train_fraction: float = 0.7
    val_fraction: float = 0.1
    # inference
    mode: str = "recurrent"
    bag_size: int = 512
    checkpoint: str = "runs/model.prwk"
    slide: str = ""
    # verify / ablate / bench
    level: str = "fast"
    axis: str = "pe"
    grid: list = field(default_factory=list)
    bench_n_grid: list = field(default_factory=lambda: [1000, 2000, 4000, 8000, 16000, 32000])
    bench_repeats: int = 1

    _CHOICES = {
        "precision": ("float32", "float64"),
        "mtl_design": ("ours", "to", "through"),
        "sampling": ("random", "z_order"),
        "z_order_mode": ("contiguous", "strided"),
        "mode": ("recurrent", "sampled"),
        "level": ("fast", "full"),
    }

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any], base: Optional["RunConfig"] = None) -> "RunConfig":
        """
        Build a config from `base` (or defaults) updated with `values`.

        Raises:
            ConfigError: On unknown keys or values that cannot be coerced
        """
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"Unknown config key(s): {', '.join(unknown)}")

        current = asdict(base) if base is not None else asdict(cls())
        for key, raw in values.items():
            current[key] = _coerce(key, raw, type(current[key]))
        config = cls(**current)
        config.validate()
        return config

    def validate(self) -> None:
        for key, allowed in self._CHOICES.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        positive = ("workers", "n_slides", "grid_w", "grid_h", "tile_px", "in_dim", "depth",
                    "embed_dim", "lora_rank", "decay_rank", "epochs", "batch_size",
                    "max_n_tiles", "bag_size", "bench_repeats")
        for key in positive:
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1, got {getattr(self, key)}")
        if self.warmup_epochs < 0:
            raise ConfigError(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")
        if not 0.0 < self.floor_factor <= 1.0:
            raise ConfigError(f"floor_factor must be in (0, 1], got {self.floor_factor}")
        if not 0.0 <= self.witness_rate <= 1.0:
            raise ConfigError(f"witness_rate must be in [0, 1], got {self.witness_rate}")
        if self.train_fraction <= 0 or self.val_fraction < 0 or self.train_fraction + self.val_fraction >= 1:
            raise ConfigError("train_fraction + val_fraction must leave room for a test split")

    def canonical(self) -> dict:
        """Normalized form: sorted keys, plain values."""
        return {k: v for k, v in sorted(asdict(self).items())}

    def config_hash(self) -> str:
        """Stable short hash of the canonical form (independent of key order)."""
        payload = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def _coerce(key: str, raw: Any, target: type) -> Any:
    try:
        if target is bool:
            if isinstance(raw, str):
                lowered = raw.strip().lower()
                if lowered in ("1", "true", "yes", "on"):
                    return True
                if lowered in ("0", "false", "no", "off"):
                    return False
                raise ValueError(raw)
            return bool(raw)
        if target is list:
            if isinstance(raw, str):
                items = [item.strip() for item in raw.split(",") if item.strip()]
            else:
                items = list(raw)
            return [_number_or_str(item) for item in items]
        if target is int:
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(raw)
            return int(raw)
        if target is float:
            return float(raw)
        return str(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"Config key '{key}' expects {target.__name__}, got {raw!r}") from None


def _number_or_str(item: Any) -> Any:
    if not isinstance(item, str):
        return item
    for cast in (int, float):
        try:
            return cast(item)
        except ValueError:
            continue
    return item


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> dict:
    """
    Collect PATHRWKV_<KEY> variables as config overrides.

    Raises:
        ConfigError: If a prefixed variable names an unknown key
    """
    environ = os.environ if environ is None else environ
    overrides = {}
    for name, value in environ.items():
        if name.startswith(ENV_PREFIX):
            overrides[name[len(ENV_PREFIX):].lower()] = value
    return overrides


def build_run_config(
    config_path: Optional[str] = None,
    cli_overrides: Optional[Mapping[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """
    Resolve the run configuration.

    Order (later wins): packaged settings.yaml < config file < environment < CLI flags.
    """
    config = RunConfig.from_mapping(load_settings())
    if config_path:
        config = RunConfig.from_mapping(load_settings(config_path), base=config)
    env = env_overrides(environ)
    if env:
        config = RunConfig.from_mapping(env, base=config)
    if cli_overrides:
        flags = {k: v for k, v in cli_overrides.items() if v is not None}
        config = RunConfig.from_mapping(flags, base=config)
    return config

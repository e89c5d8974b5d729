"""Run configuration: a versioned JSON document; unknown keys are errors.

Attack budgets in the file (``epsilon``, ``alpha``) are in 1/255 pixel steps.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .attack import AttackConfig
from .defenses import DefenseError, DefenseSpec
from .vae import VaeTrainConfig

__all__ = ["SCHEMA_VERSION", "DEFAULT_SEED", "ConfigError", "RunConfig", "load_config", "parse_defense"]

SCHEMA_VERSION = 1
DEFAULT_SEED = 3407

ATTACK_DEFAULTS = {
    "epsilon": 16,
    "alpha": 2,
    "steps": 40,
    "variance_target": None,
    "direction": "minimize",
    "criterion": "reverse_kl",
    "in_loop_transform": None,
}
TRAIN_DEFAULTS = {k: v for k, v in VaeTrainConfig().to_dict().items() if k != "seed"}


class ConfigError(ValueError):
    pass


def _merge_block(name: str, defaults: dict, given) -> dict:
    if given is None:
        return dict(defaults)
    if not isinstance(given, dict):
        raise ConfigError(f"{name} must be an object")
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown {name} keys: {sorted(unknown)}")
    return {**defaults, **given}


def parse_defense(text: str) -> DefenseSpec:
    """``"jpeg:quality=50"`` or ``"gaussian_blur"`` -> :class:`DefenseSpec`."""
    kind, _, rest = text.partition(":")
    params = {}
    for item in filter(None, rest.split(",")):
        key, eq, value = item.partition("=")
        if not eq:
            raise ConfigError(f"malformed defense parameter {item!r}")
        params[key] = float(value) if "." in value else int(value)
    try:
        return DefenseSpec(kind, params)
    except DefenseError as exc:
        raise ConfigError(str(exc)) from None


@dataclass
class RunConfig:
    dataset: str | None = None
    image_size: int = 32
    checkpoint: str | None = None
    protected: str | None = None
    output_dir: str = "runs/default"
    seed: int = DEFAULT_SEED
    limit: int | None = None
    attack: dict = field(default_factory=lambda: dict(ATTACK_DEFAULTS))
    train: dict = field(default_factory=lambda: dict(TRAIN_DEFAULTS))
    defenses: list = field(default_factory=lambda: [DefenseSpec()])
    metrics: list = field(default_factory=lambda: ["psnr", "ssim", "acdm"])
    recon_mode: str = "mean"

    def __post_init__(self):
        self.attack = _merge_block("attack", ATTACK_DEFAULTS, self.attack)
        self.train = _merge_block("train", TRAIN_DEFAULTS, self.train)
        specs = []
        for d in self.defenses or [DefenseSpec()]:
            try:
                specs.append(d if isinstance(d, DefenseSpec) else DefenseSpec.from_dict(d))
            except DefenseError as exc:
                raise ConfigError(str(exc)) from None
        self.defenses = specs
        if self.image_size < 4 or self.image_size % 4:
            raise ConfigError("image_size must be a positive multiple of 4")
        if self.recon_mode not in ("mean", "sample"):
            raise ConfigError("recon_mode must be 'mean' or 'sample'")
        self.attack_config()
        self.train_config()

    def attack_config(self) -> AttackConfig:
        a = dict(self.attack)
        if a["in_loop_transform"] is not None and not isinstance(a["in_loop_transform"], DefenseSpec):
            a["in_loop_transform"] = (
                parse_defense(a["in_loop_transform"])
                if isinstance(a["in_loop_transform"], str)
                else DefenseSpec.from_dict(a["in_loop_transform"])
            )
        try:
            return AttackConfig.from_units(seed=self.seed, **a)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid attack block: {exc}") from None

    def train_config(self) -> VaeTrainConfig:
        try:
            return VaeTrainConfig(seed=self.seed, **self.train)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid train block: {exc}") from None

    def to_dict(self) -> dict:
        out = {"schema_version": SCHEMA_VERSION}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "defenses":
                value = [d.to_dict() for d in value]
            elif f.name == "attack":
                value = dict(value)
                t = value["in_loop_transform"]
                if isinstance(t, DefenseSpec):
                    value["in_loop_transform"] = t.to_dict()
            out[f.name] = copy.deepcopy(value)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        version = data.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"config schema_version {version} is not supported (expected {SCHEMA_VERSION})")
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def digest(self) -> str:
        """Stable hash of the settings that affect campaign outputs."""
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def load_config(path) -> RunConfig:
    """Load a config file, or the config snapshot embedded in a run manifest."""
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if isinstance(data, dict) and "manifest_version" in data:
        data = data["config"]
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return RunConfig.from_dict(data)

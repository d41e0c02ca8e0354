"""Run configuration: one JSON document plus dot-path overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .diffusion import DiffusionConfig, WeightConfig
from .env import EnvConfig
from .values import CriticConfig

H_MODES = ("scaled", "geometric", "sparse")
VARIANTS = ("full", "no_hj", "no_infeasible", "no_diffusion", "il_mode")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    path: str | None = None
    n_scripted: int = 50_000
    n_random: int = 50_000
    noise_scale: float = 0.3
    seed: int = 0
    h_mode: str = "scaled"
    M: float = 25.0
    h_scale: float = 5.0
    h_floor: float | None = 0.5
    normalize_obs: bool = True

    def __post_init__(self):
        if self.h_mode not in H_MODES:
            raise ConfigError(f"h_mode must be one of {H_MODES}, got {self.h_mode!r}")
        if self.M <= 0 or self.h_scale <= 0:
            raise ConfigError("M and h_scale must be positive")
        if self.h_floor is not None and self.h_floor <= 0:
            raise ConfigError("h_floor must be positive or null")

    @property
    def label_scale(self) -> float:
        """Multiplier handed to the h relabelling for the active mode."""
        return self.M if self.h_mode == "sparse" else self.h_scale


@dataclass
class EvalConfig:
    n_candidates: int = 16
    episodes: int = 100
    cost_limit: float = 5.0
    eps: float = 0.0
    include_infeasible: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_candidates < 1:
            raise ConfigError("n_candidates must be >= 1")
        if self.episodes < 1:
            raise ConfigError("episodes must be >= 1")
        if self.cost_limit < 0:
            raise ConfigError("cost_limit must be >= 0")
        if self.cost_limit + self.eps <= 0:
            raise ConfigError("cost_limit + eps must be positive")


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    data: DataConfig = field(default_factory=DataConfig)
    critic: CriticConfig = field(default_factory=CriticConfig)
    reward_steps: int | None = None
    weights: WeightConfig = field(default_factory=WeightConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    variant: str = "full"
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, EnvConfig):
                d[f.name] = val.to_dict()
            elif is_dataclass(val):
                d[f.name] = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(val).items()}
            else:
                d[f.name] = val
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        try:
            for f in fields(cls):
                if f.name not in d:
                    continue
                val = d[f.name]
                sub = SECTIONS.get(f.name)
                if sub is EnvConfig:
                    kwargs[f.name] = EnvConfig.from_dict(val)
                elif sub is not None:
                    _check_keys(sub, val, f.name)
                    kwargs[f.name] = sub(**val)
                else:
                    kwargs[f.name] = val
            return cls(**kwargs)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path, overrides=()) -> "RunConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text()) if path.exists() else None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if d is None:
            raise ConfigError(f"config file {path} does not exist")
        return cls.from_dict(apply_overrides(d, overrides))

    def digest(self) -> str:
        import hashlib
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:8]

    def run_id(self) -> str:
        """Stable identifier used to name run directories and report files."""
        return f"{self.variant}-s{self.seed}-{self.digest()}"

    def with_overrides(self, overrides) -> "RunConfig":
        return RunConfig.from_dict(apply_overrides(self.to_dict(), overrides))


SECTIONS = {
    "env": EnvConfig, "data": DataConfig, "critic": CriticConfig, "weights": WeightConfig,
    "diffusion": DiffusionConfig, "eval": EvalConfig,
}


def _check_keys(cls, d, section):
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
    d = json.loads(json.dumps(d))
    defaults = RunConfig().to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        ref, node = defaults, d
        for p in parts[:-1]:
            if not isinstance(ref, dict) or p not in ref:
                raise ConfigError(f"unknown config key {key!r}")
            ref = ref[p]
            node = node.setdefault(p, {})
        if not isinstance(ref, dict) or parts[-1] not in ref:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_value(raw)
    return d


def describe_keys() -> str:
    """Flat listing of every config key with its default, for ``--help``."""
    lines = []

    def walk(prefix, val):
        if isinstance(val, dict):
            for k in sorted(val):
                walk(f"{prefix}.{k}" if prefix else k, val[k])
        else:
            lines.append(f"  {prefix} = {json.dumps(val)}")

    walk("", RunConfig().to_dict())
    return "\n".join(lines)

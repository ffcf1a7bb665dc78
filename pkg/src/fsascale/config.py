"""Run configuration: YAML file plus ``--set section.key=value`` overrides.

Every section maps onto a module's config dataclass; unknown keys are errors.
The resolved configuration is hashed (SHA-256 of canonical JSON) and the hash
is written into every output so artifacts can be traced back to their inputs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .calib import CalibConfig
from .data import SyntheticConfig
from .decide import DecisionConfig
from .forecast import ForecastConfig
from .policies import AutopilotConfig, RuleConfig
from .representation import ReprConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    num_apps: int = 10
    days: int = 60
    step: int = 600
    base_level: float = 20000.0
    daily_amp: float = 8000.0
    weekly_amp: float = 5000.0
    trend_slope: float = 40.0
    noise_std: float = 600.0
    burst_rate: float = 0.3
    burst_magnitude: float = 4000.0
    burst_duration: float = 3600.0
    cpu_slope: float = 0.001
    cpu_offset: float = 0.05
    cpu_noise_std: float = 0.02
    app_scale_spread: float = 0.5
    cpu_slope_spread: float = 0.3
    initial_cpu: float = 0.45
    start: int = 0
    train_frac: float = 0.7
    valid_frac: float = 0.1

    def synthetic(self, seed: int) -> SyntheticConfig:
        kw = {f.name: getattr(self, f.name) for f in dataclasses.fields(SyntheticConfig) if f.name != "seed"}
        return SyntheticConfig(seed=seed, **kw)


@dataclass
class EncodeSection:
    scales: list = field(default_factory=lambda: ["daily", "weekly"])
    every: dict = field(default_factory=lambda: {"daily": 36, "weekly": 72, "monthly": 144, "quarterly": 432})


@dataclass
class SimSection:
    policies: list = field(default_factory=lambda: ["rule_based", "autopilot_like", "fsa"])
    target_cpu: float = 0.5
    slo_threshold: float = 0.85
    kwh_per_pod_hour: float = 0.05
    kg_co2_per_kwh: float = 947_000.0 / 1_538_000.0
    min_pods: int = 1
    max_pods: int = 10_000


SECTIONS = {
    "data": DataSection,
    "repr": ReprConfig,
    "encode": EncodeSection,
    "forecast": ForecastConfig,
    "calib": CalibConfig,
    "decide": DecisionConfig,
    "rule": RuleConfig,
    "autopilot": AutopilotConfig,
    "sim": SimSection,
}
TOP_LEVEL = {"seed": 0, "artifacts": "artifacts"}


@dataclass
class RunConfig:
    seed: int = 0
    artifacts: str = "artifacts"
    sections: dict = field(default_factory=dict)

    def __getattr__(self, name):
        sections = self.__dict__.get("sections", {})
        if name in sections:
            return sections[name]
        raise AttributeError(name)

    def to_dict(self) -> dict:
        out = {"seed": self.seed, "artifacts": self.artifacts}
        for name in SECTIONS:
            out[name] = dataclasses.asdict(self.sections[name])
        return out

    def hash(self) -> str:
        doc = self.to_dict()
        doc.pop("artifacts")  # where outputs go does not change what they contain
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode("utf-8")).hexdigest()

    @property
    def artifact_dir(self) -> Path:
        return Path(self.artifacts)


def _field_names(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _number(value):
    # YAML 1.1 reads "1e6" (no dot) as a string
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        return None
    return value


def _check_type(key: str, default, value, optional: bool = False):
    """Coerce ``value`` to the kind of ``default``; raise ConfigError on mismatch."""
    if optional and value is None:
        return None
    if default is None:
        if value is None:
            return None
        out = _number(value)
    elif isinstance(default, bool):
        out = value if isinstance(value, bool) else None
    elif isinstance(default, int):
        out = value if isinstance(value, int) and not isinstance(value, bool) else None
    elif isinstance(default, float):
        out = _number(value)
        out = None if out is None else float(out)
    elif isinstance(default, (list, dict, str)):
        out = value if isinstance(value, type(default)) else None
    else:
        out = value
    if out is None:
        raise ConfigError(f"config key {key}: expected {type(default).__name__ if default is not None else 'number'}"
                          f", got {value!r}")
    return out


def _defaults(cls) -> dict:
    return {f.name: getattr(cls(), f.name) for f in dataclasses.fields(cls)}


def _optional(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls) if "None" in str(f.type)}


def build_config(raw: dict | None) -> RunConfig:
    """Validate a nested mapping into a :class:`RunConfig`."""
    raw = dict(raw or {})
    unknown = sorted(set(raw) - set(SECTIONS) - set(TOP_LEVEL))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    sections = {}
    for name, cls in SECTIONS.items():
        body = raw.get(name) or {}
        if not isinstance(body, dict):
            raise ConfigError(f"config section '{name}' must be a mapping")
        bad = sorted(set(body) - _field_names(cls))
        if bad:
            raise ConfigError(f"unknown config key(s): {', '.join(f'{name}.{k}' for k in bad)}")
        defaults, optional = _defaults(cls), _optional(cls)
        body = {k: _check_type(f"{name}.{k}", defaults[k], v, k in optional) for k, v in body.items()}
        try:
            sections[name] = cls(**body)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid '{name}' section: {exc}") from None
    seed = raw.get("seed", TOP_LEVEL["seed"])
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        raise ConfigError("seed must be a 64-bit non-negative integer")
    return RunConfig(seed, str(raw.get("artifacts", TOP_LEVEL["artifacts"])), sections)


def apply_override(raw: dict, assignment: str) -> None:
    """Apply ``section.key=value`` (or ``key=value`` for top-level keys); the value is parsed as YAML."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form section.key=value")
    path, value = assignment.split("=", 1)
    parts = path.strip().split(".")
    parsed = yaml.safe_load(value) if value.strip() else ""
    if len(parts) == 1:
        raw[parts[0]] = parsed
    elif len(parts) == 2:
        section = raw.setdefault(parts[0], {})
        if not isinstance(section, dict):
            raise ConfigError(f"config section '{parts[0]}' must be a mapping")
        section[parts[1]] = parsed
    else:
        raise ConfigError(f"override key {path!r} must be 'key' or 'section.key'")


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    raw = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from None
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: invalid YAML ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
    for item in overrides or []:
        apply_override(raw, item)
    return build_config(raw)


def dump_defaults() -> str:
    return yaml.safe_dump(build_config({}).to_dict(), sort_keys=False)

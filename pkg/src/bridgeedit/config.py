"""Run configuration: a flat ``key=value`` file with dotted section prefixes.

Schema::

    seed=0                  # global seed, copied into every section that has one
    data=runs/data          # dataset directory (train.csv / test.csv)
    out=runs/train          # output directory
    model.<field>=...       # BackboneConfig
    train.<field>=...       # TrainConfig
    sample.<field>=...      # SampleConfig
    perturb.<field>=...     # PerturbParams
    audit.<field>=...       # AuditThresholds

Unknown keys and malformed values are errors.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from . import io as bio
from .backbone import BackboneConfig
from .flow import TrainConfig
from .masks import AuditThresholds, PerturbParams
from .sampler import SampleConfig

SECTIONS = {
    "model": BackboneConfig,
    "train": TrainConfig,
    "sample": SampleConfig,
    "perturb": PerturbParams,
    "audit": AuditThresholds,
}


class ConfigError(ValueError):
    pass


def _coerce(key: str, default, raw: str):
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple) or default is None:
            return None if raw.lower() == "none" else tuple(int(x) for x in raw.split(","))
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc
    return raw


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ",".join(map(str, v))
    return str(v)


@dataclass
class RunConfig:
    seed: int = 0
    data: str = "data"
    out: str = "out"
    model: BackboneConfig = field(default_factory=BackboneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    perturb: PerturbParams = field(default_factory=PerturbParams)
    audit: AuditThresholds = field(default_factory=AuditThresholds)

    @classmethod
    def from_dict(cls, kv: dict[str, str]) -> "RunConfig":
        top, parts = {}, {name: {} for name in SECTIONS}
        for key, raw in kv.items():
            if "." in key:
                section, name = key.split(".", 1)
                if section not in SECTIONS:
                    raise ConfigError(f"unknown config section in key {key!r}")
                fields = {f.name: f for f in dataclasses.fields(SECTIONS[section])}
                if name not in fields:
                    raise ConfigError(f"unknown config key {key!r}")
                parts[section][name] = _coerce(key, fields[name].default, raw)
            elif key in ("seed",):
                top[key] = _coerce(key, 0, raw)
            elif key in ("data", "out"):
                top[key] = raw
            else:
                raise ConfigError(f"unknown config key {key!r}")
        seed = top.get("seed", 0)
        built = {}
        for name, klass in SECTIONS.items():
            values = parts[name]
            if "seed" in {f.name for f in dataclasses.fields(klass)}:
                values.setdefault("seed", seed)
            try:
                built[name] = klass(**values)
            except ValueError as exc:
                raise ConfigError(f"{name}: {exc}") from exc
        return cls(seed=seed, data=top.get("data", "data"), out=top.get("out", "out"), **built)

    @classmethod
    def load(cls, path, overrides: dict[str, str] | None = None) -> "RunConfig":
        kv = bio.read_kv(path) if path else {}
        kv.update(overrides or {})
        return cls.from_dict(kv)

    def to_dict(self) -> dict[str, str]:
        out = {"seed": str(self.seed), "data": self.data, "out": self.out}
        for name in SECTIONS:
            obj = getattr(self, name)
            for f in dataclasses.fields(obj):
                out[f"{name}.{f.name}"] = _fmt(getattr(obj, f.name))
        return out

    def write(self, path) -> None:
        bio.write_kv(path, self.to_dict())

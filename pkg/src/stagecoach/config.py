"""Runtime configuration: engine selection plus the plain-text config file.

The config file plays the role of a model namelist: key = value lines in
[workload], [engine] and [shim] sections, every key overridable from the
command line.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .codecs import CODEC_IDS
from .errors import ConfigError
from .workload import WorkloadSpec

ENDPOINT_ENV = "STAGECOACH_ENDPOINT"

ENGINE_FILE = "file"
ENGINE_STAGING = "staging"

BACKEND_FUNNEL = "funnel"
BACKEND_FPP = "fpp"
BACKEND_AGG = "agg"

MB = 1_000_000.0


@dataclass
class EngineConfig:
    engine: str = ENGINE_FILE
    backend: str = BACKEND_AGG
    aggregators_per_node: int = 1
    codec: str = "none"
    codec_level: int | None = None
    shuffle: bool = False
    per_var_codecs: dict[str, str] = field(default_factory=dict)
    bb: bool = False
    bb_dir: str | None = None
    pfs_dir: str | None = None
    drain: str = "off"
    drain_rate_limit_bytes_per_sec: float | None = None
    endpoint: str | None = None
    max_steps: int = 4
    queue_policy: str = "block"
    pfs_rate_bytes_per_sec: float | None = 200 * MB
    bb_rate_bytes_per_sec: float | None = 1000 * MB
    fabric_rate_bytes_per_sec: float | None = 200 * MB

    def validate(self) -> None:
        if self.engine not in (ENGINE_FILE, ENGINE_STAGING):
            raise ConfigError(f"engine must be file|staging, got {self.engine!r}")
        if self.backend not in (BACKEND_FUNNEL, BACKEND_FPP, BACKEND_AGG):
            raise ConfigError(f"backend must be funnel|fpp|agg, got {self.backend!r}")
        if self.codec not in CODEC_IDS:
            raise ConfigError(f"codec must be one of {sorted(CODEC_IDS)}, got {self.codec!r}")
        if self.drain not in ("off", "async"):
            raise ConfigError(f"drain must be off|async, got {self.drain!r}")
        if self.queue_policy not in ("block", "discard_oldest"):
            raise ConfigError(f"queue_policy must be block|discard_oldest")
        if self.aggregators_per_node < 1:
            raise ConfigError("aggregators_per_node must be >= 1")
        if self.engine == ENGINE_STAGING and self.resolved_endpoint() is None:
            raise ConfigError(f"staging engine needs endpoint (or ${ENDPOINT_ENV})")

    def resolved_endpoint(self) -> str | None:
        return self.endpoint or os.environ.get(ENDPOINT_ENV)


_BOOLS = {"on": True, "off": False, "true": True, "false": False, "1": True, "0": False,
          "yes": True, "no": False}


def _coerce(value: str, target_type):
    value = value.strip()
    if target_type is bool:
        try:
            return _BOOLS[value.lower()]
        except KeyError:
            raise ConfigError(f"expected on/off, got {value!r}") from None
    if target_type is str:
        # "none" is a meaningful string (the identity codec); only bare
        # "None" marks an unset optional field
        return None if value in ("None", "") else value
    if value.lower() in ("none", ""):
        return None
    return target_type(value)


def load_config_file(path) -> tuple[WorkloadSpec, EngineConfig]:
    """Parse the sectioned key=value config file into spec + engine config."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # variable names in codec.<name> keys are case-sensitive
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")

    spec_kwargs = {}
    spec_fields = {f.name: f for f in fields(WorkloadSpec)}
    for key, raw in parser.items("workload") if parser.has_section("workload") else []:
        f = spec_fields.get(key)
        if f is None:
            raise ConfigError(f"unknown [workload] key {key!r}")
        base = bool if isinstance(f.default, bool) else type(f.default)
        spec_kwargs[key] = _coerce(raw, base)

    cfg_kwargs = {}
    per_var = {}
    cfg_fields = {f.name: f for f in fields(EngineConfig)}
    sections = [s for s in ("engine", "shim") if parser.has_section(s)]
    for section in sections:
        for key, raw in parser.items(section):
            if key.startswith("codec."):
                per_var[key.split(".", 1)[1]] = raw.strip()
                continue
            f = cfg_fields.get(key)
            if f is None:
                raise ConfigError(f"unknown [{section}] key {key!r}")
            ftype = str(f.type)
            if key in ("codec_level", "max_steps", "aggregators_per_node"):
                cfg_kwargs[key] = _coerce(raw, int)
            elif "float" in ftype:
                cfg_kwargs[key] = _coerce(raw, float)
            elif ftype == "bool" or key in ("shuffle", "bb"):
                cfg_kwargs[key] = _coerce(raw, bool)
            else:
                cfg_kwargs[key] = _coerce(raw, str)
    if per_var:
        cfg_kwargs["per_var_codecs"] = per_var

    try:
        spec = WorkloadSpec(**spec_kwargs)
        cfg = EngineConfig(**cfg_kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    cfg.validate()
    return spec, cfg


def write_config_file(path, spec: WorkloadSpec, cfg: EngineConfig) -> None:
    """Emit a round-trippable config file (handy for fixtures and examples)."""
    lines = ["[workload]"]
    for f in fields(WorkloadSpec):
        v = getattr(spec, f.name)
        if isinstance(v, bool):
            v = "on" if v else "off"
        lines.append(f"{f.name} = {v}")
    lines.append("")
    lines.append("[engine]")
    shim_keys = {"pfs_rate_bytes_per_sec", "bb_rate_bytes_per_sec", "fabric_rate_bytes_per_sec"}
    for f in fields(EngineConfig):
        if f.name in shim_keys or f.name == "per_var_codecs":
            continue
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "on" if v else "off"
        lines.append(f"{f.name} = {v}")
    for name, codec in cfg.per_var_codecs.items():
        lines.append(f"codec.{name} = {codec}")
    lines.append("")
    lines.append("[shim]")
    for k in sorted(shim_keys):
        lines.append(f"{k} = {getattr(cfg, k)}")
    Path(path).write_text("\n".join(lines) + "\n")

"""Flat INI run configuration with strict keys and exact round-tripping."""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field
from typing import Any, Optional


class ConfigError(ValueError):
    """Invalid or unknown configuration input."""


def _floats(text: str) -> tuple:
    text = text.strip()
    if not text:
        return ()
    return tuple(float(t) for t in text.split(","))


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _opt_float(text: str) -> Optional[float]:
    text = text.strip()
    return None if text in ("", "none") else float(text)


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "model": {
        "d": (int, 2),
        "sigma": (float, 1.0),
        "potential": (str, "torus"),
        "amplitude": (float, 1.0),
        "a": (_floats, (1.0, 1.0)),
        "poincare": (_opt_float, None),
        "n2": (_opt_float, None),
    },
    "grid": {
        "mode": (str, "torus"),
        "n_x": (int, 32),
        "n_alpha": (int, 32),
        "half_width": (float, 6.0),
        "stabilization": (float, 1.0),
    },
    "sampler": {
        "seed": (int, 0),
        "dt": (float, 1e-3),
        "steps": (int, 1000),
        "stride": (int, 10),
        "outer": (int, 512),
        "inner": (int, 256),
        "times": (_floats, (0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0)),
        "mc_nodes": (int, 1_000_000),
        "angle_nodes": (int, 64),
    },
    "certify": {
        "tolerance": (float, 1e-10),
        "slack": (float, 1e-8),
        "n_g": (int, 20),
        "times": (_floats, (0.1, 0.25, 0.5, 1.0, 2.0, 3.0, 5.0, 7.5, 10.0)),
        "n2_samples": (int, 16),
        "boundary_mass": (float, 1e-8),
        "method": (str, "auto"),
    },
    "output": {
        "dir": (str, "out"),
    },
}

CHOICES = {
    ("model", "potential"): ("torus", "quadratic"),
    ("grid", "mode"): ("torus", "box"),
    ("certify", "method"): ("auto", "dense", "reduced"),
}


def _defaults(section: str) -> dict:
    return {k: v[1] for k, v in SCHEMA[section].items()}


@dataclass
class RunConfig:
    model: dict = field(default_factory=lambda: _defaults("model"))
    grid: dict = field(default_factory=lambda: _defaults("grid"))
    sampler: dict = field(default_factory=lambda: _defaults("sampler"))
    certify: dict = field(default_factory=lambda: _defaults("certify"))
    output: dict = field(default_factory=lambda: _defaults("output"))
    sections_present: frozenset = frozenset()

    def section(self, name: str) -> dict:
        return getattr(self, name)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for sec in SCHEMA:
            cp[sec] = {k: _fmt(v) for k, v in self.section(sec).items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def as_dict(self) -> dict:
        return {sec: {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.section(sec).items()}
                for sec in SCHEMA}

    def __eq__(self, other: Any) -> bool:
        return isinstance(other, RunConfig) and self.as_dict() == other.as_dict()


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    cfg = RunConfig()
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        target = cfg.section(sec)
        for key, raw in cp[sec].items():
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {key!r} in [{sec}]")
            parser = SCHEMA[sec][key][0]
            try:
                value = parser(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {sec}.{key}: {raw!r}") from exc
            allowed = CHOICES.get((sec, key))
            if allowed and value not in allowed:
                raise ConfigError(f"{sec}.{key} must be one of {allowed}, got {value!r}")
            target[key] = value
    cfg.sections_present = frozenset(cp.sections())
    _validate(cfg)
    return cfg


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc


def _validate(cfg: RunConfig) -> None:
    m = cfg.model
    if m["d"] < 2:
        raise ConfigError("model.d must be >= 2")
    if not m["sigma"] > 0:
        raise ConfigError("model.sigma must be positive")
    if m["potential"] == "quadratic" and len(m["a"]) != m["d"]:
        raise ConfigError("model.a needs one coefficient per dimension")
    if cfg.sampler["dt"] <= 0:
        raise ConfigError("sampler.dt must be positive")
    if cfg.grid["n_x"] < 3 or cfg.grid["n_alpha"] < 3:
        raise ConfigError("grid sizes too small")

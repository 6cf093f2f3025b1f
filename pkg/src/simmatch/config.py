"""Flat ``key = value`` configuration for the matcher."""
from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path

from .kinematics import MotionModel, ObsModel
from .onroad import HmmParams
from .simm import ModeTransitionMatrix, SimmParams

ENV_VAR = "SIMM_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass
class MatchConfig:
    sigma_z: float = 4.07
    beta: float = 3.0
    search_radius: float = 50.0
    max_candidates: int = 8
    route_cutoff: float = 2000.0
    cutoff_factor: float = 10.0
    q: float = 2.0
    default_accuracy: float = 10.0
    pi_rr: float = 0.99
    pi_gg: float = 0.95
    mu0_road: float = 0.9
    r2g_velocity: str = "tangent"
    # output
    mu_out: str = ""
    indent: int = 1

    def params(self) -> SimmParams:
        """Validated model parameters; bad values raise :class:`ConfigError`."""
        try:
            return SimmParams(
                hmm=HmmParams(self.sigma_z, self.beta, self.search_radius, self.max_candidates,
                              self.route_cutoff, self.cutoff_factor),
                motion=MotionModel(self.q),
                obs=ObsModel(self.default_accuracy),
                transition=ModeTransitionMatrix.from_stay(self.pi_rr, self.pi_gg),
                mu0_road=self.mu0_road,
                r2g_velocity=self.r2g_velocity,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


_TYPES = {f.name: f.type for f in fields(MatchConfig)}


def _convert(key: str, raw: str, line: int):
    kind = _TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"line {line}: {key} expects a number, got {raw!r}") from None
    return raw


def parse_config(text: str, base: MatchConfig | None = None) -> MatchConfig:
    cfg = MatchConfig(**vars(base)) if base else MatchConfig()
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        setattr(cfg, key, _convert(key, value, n))
    cfg.params()
    return cfg


def load_config(path: str | os.PathLike | None = None) -> MatchConfig:
    """Read ``path``, else the file named by $SIMM_CONFIG, else the defaults."""
    path = path or os.environ.get(ENV_VAR) or None
    if path is None:
        return MatchConfig()
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(cfg: MatchConfig) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in fields(cfg))

"""Run configuration: a YAML file with nested sections, validated by pydantic."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .experiment import FIG3_P_N, FIG4_MU, FIG4_P_N


class ConfigError(Exception):
    """The configuration file cannot be read or does not validate."""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class StateConfig(_Section):
    kind: Literal["example", "annulus", "matrix"] = "example"
    D: int = 50
    c: float = 0.6
    inner_radius: float = 24.0
    outer_radius: float = 28.0
    bin_width: float = 2.0
    matrix_path: Optional[str] = None
    renormalize: bool = False


class DetectorConfig(_Section):
    p_d: float = 0.5
    p_n: float = 0.01


class SourceConfig(_Section):
    mu: float = 1.0
    mu_grid: List[float] = Field(default_factory=lambda: [round(0.1 * k, 10) for k in range(1, 41)])
    truncation_tail: float = 1e-12


class AnalyticConfig(_Section):
    array_mode: Literal["dual", "single"] = "dual"
    cell: Optional[Tuple[int, int]] = None
    decomposition_mu: List[float] = Field(default_factory=list)


class MonteCarloConfig(_Section):
    seed: int = 1
    n_frames: int = 100_000
    tagging: bool = False
    workers: int = 1
    block_size: int = 4096
    array_mode: Literal["dual", "single"] = "dual"
    dump_frames: bool = False

    @field_validator("seed")
    @classmethod
    def _u64(cls, v):
        if not 0 <= v < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        return v


class Fig3Config(_Section):
    p_n_list: List[float] = Field(default_factory=lambda: list(FIG3_P_N))
    p_d: float = 0.5
    D: int = 50
    c: float = 0.6
    mu_grid: Optional[List[float]] = None


class Fig4Config(_Section):
    inner_radius: float = 24.0
    outer_radius: float = 28.0
    bin_width: float = 2.0
    p_d: float = 0.5
    p_n: float = FIG4_P_N
    mu_grid: List[float] = Field(default_factory=lambda: list(FIG4_MU))
    n_frames: int = 2000
    seed: int = 1
    # optional pump/exposure sweep; overrides mu_grid when all three are given
    fluxes: Optional[Dict[str, float]] = None
    exposures: Optional[Dict[str, float]] = None
    p_n_by_exposure: Optional[Dict[str, float]] = None


class Config(_Section):
    state: StateConfig = Field(default_factory=StateConfig)
    detector: DetectorConfig = Field(default_factory=DetectorConfig)
    source: SourceConfig = Field(default_factory=SourceConfig)
    analytic: AnalyticConfig = Field(default_factory=AnalyticConfig)
    mc: MonteCarloConfig = Field(default_factory=MonteCarloConfig)
    fig3: Fig3Config = Field(default_factory=Fig3Config)
    fig4: Fig4Config = Field(default_factory=Fig4Config)
    out_dir: str = "out"

    def digest(self) -> str:
        """Short hash of everything that affects results (the output location does not)."""
        canon = json.dumps(self.model_dump(mode="json", exclude={"out_dir"}), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


def load_config(path: Optional[str] = None) -> Config:
    if path is None:
        return Config()
    return parse_config(Path(path).read_text())  # OSError propagates as an I/O failure


def parse_config(text: str) -> Config:
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping of sections")
    try:
        return Config.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def dump_config(cfg: Config) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)


def apply_overrides(cfg: Config, seed=None, frames=None, out=None, tagging=None, array_mode=None) -> Config:
    """Return a copy of ``cfg`` with command-line flags applied."""
    data = cfg.model_dump(mode="json")
    if seed is not None:
        data["mc"]["seed"] = seed
        data["fig4"]["seed"] = seed
    if frames is not None:
        data["mc"]["n_frames"] = frames
        data["fig4"]["n_frames"] = frames
    if out is not None:
        data["out_dir"] = out
    if tagging:
        data["mc"]["tagging"] = True
    if array_mode is not None:
        data["mc"]["array_mode"] = array_mode
        data["analytic"]["array_mode"] = array_mode
    try:
        return Config.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc

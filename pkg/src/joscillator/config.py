"""Scenario files: schema, loading, overrides, hashing and model construction.

Scenarios are YAML documents whose keys carry their units (``tau_ms``,
``J_Hz``, ...). Unknown keys are rejected with the offending path.
"""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Literal

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .dissipator import RelaxationParams, ts_for_linewidth
from .errors import ConfigurationError
from .feedback import FeedbackConfig, GeometrySample
from .model import Species
from .spins import alpha_beta_from_integrals, build_a3x_system, build_two_spin_system

SWEEP_PARAMS = ("tau", "G_ext", "noise_rms", "Ts", "duration")
SCENARIO_DIR = Path(__file__).with_name("scenarios")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SpeciesSpec(_Strict):
    name: str = "species"
    model: Literal["a3x", "two-spin"] = "a3x"
    J_Hz: float = Field(gt=0)
    concentration_mM: float = Field(gt=0)
    I_1J_pT: float = Field(ge=0)
    I_2J_pT: float = Field(default=0.0, ge=0)
    Ts_s: float | None = Field(default=None, gt=0)
    fwhm_Hz: float | None = Field(default=None, gt=0)

    @model_validator(mode="after")
    def _relaxation(self):
        if (self.Ts_s is None) == (self.fwhm_Hz is None):
            raise ValueError("give exactly one of Ts_s and fwhm_Hz")
        if self.model == "two-spin" and self.I_2J_pT != 0:
            raise ValueError("a two-spin system has no 2J line; I_2J_pT must be 0")
        return self


class GeometrySpec(_Strict):
    r_mm: float = Field(default=4.2, gt=0)
    d_mm: float = Field(default=12.45, gt=0)


class FeedbackSpec(_Strict):
    enabled: bool = True
    tau_ms: float = Field(default=222.0, ge=0)
    G_ext: float = 0.0
    fs_Hz: float = Field(default=2000.0, gt=0)
    Nc: int = Field(default=20, gt=0)
    Nb: int = Field(default=4096, gt=0)
    hardware_delay_samples: int | None = Field(default=None, ge=0)
    noise_rms_pT: float = Field(default=0.1, ge=0)
    seed: int = Field(default=0, ge=0)


class RunSpec(_Strict):
    duration_s: float = Field(default=300.0, ge=0)
    mode: Literal["oscillator", "free-decay"] = "oscillator"
    initial_state: Literal["equilibrium", "pulsed"] = "equilibrium"
    pulse_angle_deg: float = 90.0
    dissipator_order: Literal[1, 2] = 2
    steady_span_s: float = Field(default=30.0, gt=0)


class SweepSpec(_Strict):
    param: Literal["tau", "G_ext", "noise_rms", "Ts", "duration"]
    values: list[float] = []


class GainSpectrumSpec(_Strict):
    f_min_Hz: float = Field(default=0.5, gt=0)
    f_max_Hz: float = Field(default=4.0, gt=0)
    points: int = Field(default=36, ge=1)
    method: Literal["time", "linear"] = "time"
    window_s: float = Field(default=10.0, gt=0)

    @model_validator(mode="after")
    def _range(self):
        if self.f_max_Hz < self.f_min_Hz:
            raise ValueError("f_max_Hz must not be below f_min_Hz")
        return self


class OutputSpec(_Strict):
    formats: list[Literal["csv", "json"]] = ["csv", "json"]
    diagnostics_stride: int = Field(default=0, ge=0)
    dump_raw: bool = False
    spectrum: bool = True


class ScenarioConfig(_Strict):
    name: str = "scenario"
    description: str = ""
    species: list[SpeciesSpec] = Field(min_length=1)
    geometry: GeometrySpec = GeometrySpec()
    feedback: FeedbackSpec = FeedbackSpec()
    run: RunSpec = RunSpec()
    sweep: SweepSpec | None = None
    gain_spectrum: GainSpectrumSpec = GainSpectrumSpec()
    outputs: OutputSpec = OutputSpec()

    @model_validator(mode="after")
    def _modes(self):
        if self.run.mode == "free-decay" and len(self.species) != 1:
            raise ValueError("free-decay runs take a single species")
        return self


# ---------------------------------------------------------------- loading

def _format_error(exc: ValidationError) -> str:
    lines = []
    for e in exc.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{path}: {e['msg']}")
    return "; ".join(lines)


def parse_override(text: str):
    """'a.b.0.c=value' -> (['a', 'b', 0, 'c'], value) with the value parsed as YAML."""
    if "=" not in text:
        raise ConfigurationError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    if not key:
        raise ConfigurationError(f"override {text!r} has an empty key")
    path = [int(p) if p.isdigit() else p for p in key.strip().split(".")]
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"override {text!r}: {exc}") from None
    return path, value


def apply_overrides(data: dict, overrides) -> dict:
    data = copy.deepcopy(data)
    for item in overrides or ():
        path, value = parse_override(item) if isinstance(item, str) else item
        node = data
        for i, key in enumerate(path[:-1]):
            try:
                if isinstance(node, list):
                    node = node[key]
                else:
                    node = node.setdefault(key, {})
            except (IndexError, TypeError, KeyError):
                raise ConfigurationError(f"override path {'.'.join(map(str, path[:i + 1]))} does not exist") from None
        try:
            node[path[-1]] = value
        except (IndexError, TypeError):
            raise ConfigurationError(f"override path {'.'.join(map(str, path))} does not exist") from None
    return data


def validate(data) -> ScenarioConfig:
    if not isinstance(data, dict):
        raise ConfigurationError("scenario must be a mapping")
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigurationError(_format_error(exc)) from None


def load_config(path, overrides=(), seed: int | None = None) -> ScenarioConfig:
    """Read, override and validate a scenario file.

    ``path`` may also name a shipped scenario (e.g. ``fig1d``).
    """
    p = Path(path)
    if not p.exists() and (SCENARIO_DIR / f"{path}.yaml").exists():
        p = SCENARIO_DIR / f"{path}.yaml"
    try:
        text = p.read_text()
    except OSError as exc:
        raise OSError(exc.errno, f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: invalid YAML ({exc})") from None
    data = apply_overrides(data, overrides)
    if seed is not None:
        data = apply_overrides(data, [(["feedback", "seed"], int(seed))])
    return validate(data)


def config_hash(cfg: ScenarioConfig) -> str:
    """sha256 of the canonical JSON form of the validated scenario."""
    blob = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def with_sweep_value(cfg: ScenarioConfig, param: str, value: float) -> ScenarioConfig:
    """Copy of ``cfg`` with one sweep parameter set (units as in the scenario keys)."""
    data = cfg.model_dump()
    if param == "tau":
        data["feedback"]["tau_ms"] = value
    elif param == "G_ext":
        data["feedback"]["G_ext"] = value
    elif param == "noise_rms":
        data["feedback"]["noise_rms_pT"] = value
    elif param == "duration":
        data["run"]["duration_s"] = value
    elif param == "Ts":
        for sp in data["species"]:
            sp["Ts_s"], sp["fwhm_Hz"] = value, None
    else:
        raise ConfigurationError(f"unknown sweep parameter {param!r}; expected one of {SWEEP_PARAMS}")
    data["sweep"] = None
    return validate(data)


# ---------------------------------------------------------------- construction

def build_species(cfg: ScenarioConfig) -> list[Species]:
    out = []
    for sp in cfg.species:
        system = build_a3x_system(sp.J_Hz) if sp.model == "a3x" else build_two_spin_system(sp.J_Hz)
        geo = GeometrySample(cfg.geometry.r_mm * 1e-3, cfg.geometry.d_mm * 1e-3, sp.concentration_mM)
        Ts = sp.Ts_s if sp.Ts_s is not None else ts_for_linewidth(system, sp.fwhm_Hz)
        eq = alpha_beta_from_integrals(sp.I_1J_pT * 1e-12, sp.I_2J_pT * 1e-12, geo)
        out.append(Species(system, geo, RelaxationParams(Ts), eq))
    return out


def build_feedback(cfg: ScenarioConfig) -> FeedbackConfig | None:
    fb = cfg.feedback
    if not fb.enabled:
        return None
    return FeedbackConfig(tau=fb.tau_ms * 1e-3, G_ext=fb.G_ext, fs=fb.fs_Hz, Nc=fb.Nc, Nb=fb.Nb,
                          hardware_delay=fb.hardware_delay_samples, noise_rms=fb.noise_rms_pT * 1e-12,
                          seed=fb.seed)


def gain_grid(cfg: ScenarioConfig) -> np.ndarray:
    g = cfg.gain_spectrum
    return np.linspace(g.f_min_Hz, g.f_max_Hz, g.points)

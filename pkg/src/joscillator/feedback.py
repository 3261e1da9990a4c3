"""Digital feedback chain: sensed field, sensor noise, cyclic-buffer delay and gain."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import constants as const
from .errors import ConfigurationError
from .spins import SpinSystem, detection_operator


@dataclass(frozen=True)
class GeometrySample:
    """Spherical sample of radius r at distance d from a point sensor.

    r, d in metres; C (target-molecule concentration) in mol/m^3.
    """

    r: float
    d: float
    C: float

    def __post_init__(self):
        if not 0 < self.r < self.d:
            raise ConfigurationError(f"require 0 < r < d (got r={self.r}, d={self.d})")
        if self.C < 0:
            raise ConfigurationError("concentration must be non-negative")

    @property
    def geometric_factor(self):
        """r^3 / (3 d^3)"""
        return self.r**3 / (3 * self.d**3)


def opm_field(M, geo: GeometrySample):
    """Sensed field B = -(mu_0/3)(r/d)^3 M in tesla, for magnetization M in A/m."""
    return -const.MU_0 * geo.geometric_factor * M


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class FeedbackConfig:
    """Delay-line feedback settings.

    ``hardware_delay`` (samples) defaults to one chunk, the pipeline latency of
    the chunked read/write loop, so the net loop delay is round(tau * fs).
    """

    tau: float
    G_ext: float
    fs: float = 2000.0
    Nc: int = 20
    Nb: int = 4096
    hardware_delay: int | None = None
    noise_rms: float = 1e-13
    seed: int = 0

    def __post_init__(self):
        if self.hardware_delay is None:
            object.__setattr__(self, "hardware_delay", self.Nc)
        if not self.fs > 0:
            raise ConfigurationError("fs must be positive")
        if self.Nc < 1:
            raise ConfigurationError("Nc must be >= 1")
        if self.tau < 0:
            raise ConfigurationError("tau must be non-negative")
        if self.noise_rms < 0:
            raise ConfigurationError("noise_rms must be non-negative")
        if not 0 < self.delay_samples < self.Nb:
            raise ConfigurationError(
                f"DELAY = round(tau*fs) - hardware_delay = {self.delay_samples} must lie in (0, Nb={self.Nb})")

    @property
    def delay_samples(self) -> int:
        """DELAY: buffer read offset in samples."""
        return round_half_up(self.tau * self.fs) - self.hardware_delay

    def check_bandwidth(self, sys: SpinSystem):
        if not self.fs > 2 * sys.max_frequency:
            raise ConfigurationError(f"fs={self.fs} Hz does not resolve the {sys.max_frequency} Hz line")


@dataclass
class LoopState:
    """Cyclic buffer and write index. Single-owner mutable state."""

    buffer: np.ndarray
    i: int = 0

    @classmethod
    def zeros(cls, cfg: FeedbackConfig) -> "LoopState":
        return cls(np.zeros(cfg.Nb))


def process_chunk(state: LoopState, read, cfg: FeedbackConfig) -> np.ndarray:
    """One pass of the continuous loop.

    Buffer[(i + k) % Nb] = READ[k]; WRITE[k] = G * Buffer[(i + k - DELAY) % Nb];
    i += Nc.
    """
    read = np.asarray(read, dtype=float)
    if read.shape != (cfg.Nc,):
        raise ValueError(f"chunk must hold exactly Nc={cfg.Nc} samples, got {read.shape}")
    k = np.arange(cfg.Nc)
    state.buffer[(state.i + k) % cfg.Nb] = read
    write = state.buffer[(state.i + k - cfg.delay_samples) % cfg.Nb]
    write = write * cfg.G_ext
    state.i += cfg.Nc
    return write


def make_rng(cfg: FeedbackConfig) -> np.random.Generator:
    return np.random.default_rng(cfg.seed)


def add_sensor_noise(samples, cfg: FeedbackConfig, rng: np.random.Generator | None = None):
    """Add white Gaussian noise of rms ``cfg.noise_rms``.

    Pass one generator per run so successive chunks draw fresh samples; without
    one, a generator seeded from ``cfg.seed`` is used.
    """
    samples = np.asarray(samples, dtype=float)
    if cfg.noise_rms == 0:
        return samples.copy()
    if rng is None:
        rng = make_rng(cfg)
    return samples + rng.normal(0.0, cfg.noise_rms, size=samples.shape)


def feedback_hamiltonian(B_ext: float, sys: SpinSystem) -> np.ndarray:
    """V = -B_ext (gamma_S Sy + gamma_K Ky), rad/s."""
    return -B_ext * detection_operator(sys)


def phase_lag(f: float, tau: float, gain_sign: float) -> float:
    """Loop phase 2 pi f tau, plus pi for negative gain. Not reduced modulo 2 pi."""
    return 2 * np.pi * f * tau + (np.pi if gain_sign < 0 else 0.0)

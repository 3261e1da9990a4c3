"""Strang-splitting propagation of the master equation, coupled to the feedback loop.

One run is a sequential state machine (:class:`Simulation`): per sample the
sensed field is recorded, pushed through the delay line chunk by chunk, and the
returned chunk is applied as B_ext during the following chunk.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import expm

from . import constants as const
from . import kernel
from .dissipator import RelaxationParams, Superoperator, coherence_decay_rate
from .errors import ConfigurationError, ConvergenceError, InstabilityError, NumericError
from .feedback import (FeedbackConfig, GeometrySample, LoopState, make_rng, process_chunk,
                       round_half_up)
from .model import Species, SpeciesModel, build_model
from .spins import EquilibriumParams, SpinSystem, as_matrix, pulse_unitary


# ---------------------------------------------------------------- reference step

def strang_step(rho, H0, V_quarter1, V_quarter3, R: Superoperator, P, dt, order: int = 2):
    """One dense Strang step.

    rho <- U2 D(U1 rho U1^H) U2^H with U1, U2 the half-step propagators of
    H0 + V at t + dt/4 and t + 3dt/4, and D the dissipative sub-step.
    """
    m = as_matrix(rho)
    if dt == 0:
        return m.copy()
    H1 = H0 + V_quarter1
    H3 = H0 + V_quarter3
    if not (np.all(np.isfinite(H1)) and np.all(np.isfinite(H3)) and np.all(np.isfinite(m))):
        raise NumericError("non-finite input to strang_step")
    U1 = expm(-1j * H1 * dt / 2)
    U2 = U1 if V_quarter3 is V_quarter1 else expm(-1j * H3 * dt / 2)
    m = U1 @ m @ U1.conj().T
    k1 = R(m) + P
    m = m + dt * k1
    if order == 2:
        m = m + 0.5 * dt * dt * R(k1)
    return U2 @ m @ U2.conj().T


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class Drive:
    """Applied AC field intensity H(t) = amplitude * cos(2 pi f t + phase), A/m."""

    f: float
    amplitude: float
    phase: float = 0.0

    def field(self, t):
        return const.MU_0 * self.amplitude * np.cos(2 * np.pi * self.f * t + self.phase)


@dataclass(frozen=True)
class RunConfig:
    """Run settings.

    ``initial_state`` is "equilibrium", "pulsed" (uses ``pulse_angle``) or a
    density matrix (a list of matrices for multi-species runs). ``field`` is an
    optional prescribed B_ext(t) in tesla, vectorized over t.
    """

    duration: float
    fs: float | None = None
    dt: float | None = None
    initial_state: object = "equilibrium"
    pulse_angle: float = np.pi / 2
    feedback: FeedbackConfig | None = None
    drive: Drive | None = None
    field: Callable | None = None
    dissipator_order: int = 2
    blowup_ceiling: float = 1e-6
    diagnostics_stride: int = 0

    def __post_init__(self):
        if self.duration < 0:
            raise ConfigurationError("duration must be non-negative")
        if self.feedback is not None and self.fs is not None and self.fs != self.feedback.fs:
            raise ConfigurationError("fs differs from feedback.fs")
        if self.feedback is not None and (self.drive is not None or self.field is not None):
            raise ConfigurationError("feedback runs cannot also prescribe a drive or field")
        if self.drive is not None and self.field is not None:
            raise ConfigurationError("give either drive or field, not both")
        if self.dt is not None and not self.dt > 0:
            raise ConfigurationError("dt must be positive")
        if self.dt is not None and self.dt > 1 / self.sample_rate * (1 + 1e-12):
            raise ConfigurationError("dt must not exceed 1/fs")
        ratio = 1 / (self.sample_rate * self.step)
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigurationError("1/fs must be an integer multiple of dt")
        n = self.duration * self.sample_rate
        if abs(n - round(n)) > 1e-6:
            raise ConfigurationError("duration must be an integer number of samples")
        if self.dissipator_order not in (1, 2):
            raise ConfigurationError("dissipator_order must be 1 or 2")

    @property
    def sample_rate(self) -> float:
        if self.feedback is not None:
            return self.feedback.fs
        return self.fs if self.fs is not None else 2000.0

    @property
    def step(self) -> float:
        return self.dt if self.dt is not None else 1 / self.sample_rate

    @property
    def substeps(self) -> int:
        return int(round(1 / (self.sample_rate * self.step)))

    @property
    def n_samples(self) -> int:
        return int(round(self.duration * self.sample_rate))


# ---------------------------------------------------------------- trace

@dataclass
class SimTrace:
    """Uniformly sampled run output; sample n is at time n / fs.

    ``diagnostics`` (optional) holds channels sampled every ``stride`` samples,
    all of equal length, including a "t_s" time axis.
    """

    fs: float
    b_opm: np.ndarray
    b_ext: np.ndarray
    diagnostics: dict | None = None
    stride: int = 0

    def __post_init__(self):
        if len(self.b_opm) != len(self.b_ext):
            raise ValueError("b_opm and b_ext must have equal length")

    def __len__(self):
        return len(self.b_opm)

    @property
    def t(self):
        return np.arange(len(self)) / self.fs

    @property
    def duration(self):
        return len(self) / self.fs

    def segment(self, t0: float, t1: float | None = None) -> "SimTrace":
        """Samples with t0 <= t < t1 (diagnostics dropped)."""
        a = round_half_up(t0 * self.fs)
        b = len(self) if t1 is None else round_half_up(t1 * self.fs)
        return SimTrace(self.fs, self.b_opm[a:b], self.b_ext[a:b])

    def write_csv(self, path):
        """Columns t_s, B_OPM_pT, B_ext_pT."""
        with open(path, "w", newline="") as fh:
            fh.write("t_s,B_OPM_pT,B_ext_pT\n")
            t = self.t
            step = 100000
            for a in range(0, len(self), step):
                block = np.column_stack([t[a:a + step], self.b_opm[a:a + step] * 1e12,
                                         self.b_ext[a:a + step] * 1e12])
                np.savetxt(fh, block, fmt=["%.6f", "%.9e", "%.9e"], delimiter=",")

    def write_diagnostics_csv(self, path):
        if not self.diagnostics:
            return
        keys = list(self.diagnostics)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(keys)
            for row in zip(*(self.diagnostics[k] for k in keys)):
                w.writerow([f"{v:.12e}" for v in row])

    def write_raw(self, path):
        """Little-endian float64 records (n, B_OPM[n], B_ext[n]), SI units."""
        arr = np.column_stack([np.arange(len(self), dtype="<f8"), self.b_opm, self.b_ext]).astype("<f8")
        arr.tofile(path)

    @classmethod
    def read_csv(cls, path) -> "SimTrace":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)  # empty file: reported below
            data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if data.shape[1] < 2 or len(data) < 2:
            raise ValueError(f"{path}: expected columns t_s,B_OPM_pT[,B_ext_pT] and >= 2 rows")
        dt = np.diff(data[:, 0])
        fs = 1 / np.mean(dt)
        if np.max(np.abs(dt * fs - 1)) > 1e-3:
            raise ValueError(f"{path}: time axis is not uniform")
        b_ext = data[:, 2] * 1e-12 if data.shape[1] > 2 else np.zeros(len(data))
        return cls(float(round(fs, 6)), data[:, 1] * 1e-12, b_ext)


# ---------------------------------------------------------------- engine

def _initial_states(models, runcfg: RunConfig):
    init = runcfg.initial_state
    if isinstance(init, str):
        if init == "equilibrium":
            return [m.rho_eq.copy() for m in models]
        if init == "pulsed":
            out = []
            for m in models:
                U = pulse_unitary(m.system, runcfg.pulse_angle)
                out.append(U @ m.rho_eq @ U.conj().T)
            return out
        raise ConfigurationError(f"unknown initial_state {init!r}")
    mats = [as_matrix(init)] if len(models) == 1 and np.ndim(as_matrix(init)) == 2 else [as_matrix(r) for r in init]
    if len(mats) != len(models):
        raise ConfigurationError("one initial density matrix per species required")
    return [np.array(r, dtype=complex) for r in mats]


class Simulation:
    """Resumable run over one or more species sharing the feedback field."""

    def __init__(self, models: Sequence[SpeciesModel], runcfg: RunConfig, backend: str | None = None):
        if len(models) == 0:
            raise ConfigurationError("at least one species required")
        self.models = list(models)
        self.cfg = runcfg
        self.backend = backend
        self.fs = runcfg.sample_rate
        self.dt = runcfg.step
        self.sub = runcfg.substeps
        fb = runcfg.feedback
        for m in self.models:
            if not self.fs > 2 * m.system.max_frequency:
                raise ConfigurationError(f"fs={self.fs} Hz too low for the {m.system.max_frequency} Hz line")
            if not self.dt < m.R.Ts / 100:
                raise ConfigurationError("dt must be < Ts/100")
        self.states = [m.to_kernel(r) for m, r in zip(self.models, _initial_states(self.models, runcfg))]
        self.n = 0
        if fb is not None:
            self.loop = LoopState.zeros(fb)
            self.pending = np.zeros(fb.Nc)
            self.read = np.zeros(fb.Nc)
            self.rng = make_rng(fb)
        if runcfg.drive is not None:
            self._field = runcfg.drive.field
        else:
            self._field = runcfg.field
        self.diag = {} if runcfg.diagnostics_stride > 0 else None

    # -- helpers
    def density_matrices(self):
        """Current states in the product basis."""
        return [m.from_kernel(r) for m, r in zip(self.models, self.states)]

    def _record_diagnostics(self):
        d = self.diag
        d.setdefault("t_s", []).append(self.n / self.fs)
        multi = len(self.models) > 1
        for s, (m, r) in enumerate(zip(self.models, self.states)):
            pre = f"s{s}_" if multi else ""
            for mp, Pk in zip(m.projectors, m.kernel_projectors()):
                key = f"{pre}pop_K{mp.K:g}_F{mp.F:g}"
                d.setdefault(key, []).append(float(np.real(np.sum(Pk.T * r))))
            d.setdefault(f"{pre}trace_dev", []).append(float(abs(np.trace(r) - 1)))
            d.setdefault(f"{pre}herm_dev", []).append(float(np.abs(r - r.conj().T).max()))
            d.setdefault(f"{pre}min_eig", []).append(float(np.linalg.eigvalsh(0.5 * (r + r.conj().T)).min()))

    def _evolve(self, b1, b3, n_samples):
        """Evolve every species over n_samples samples; returns summed B_OPM (clean)."""
        total = np.zeros(n_samples)
        sub = self.sub
        for m, r in zip(self.models, self.states):
            out, bad = kernel.advance(m.ops, r, b1, b3, self.dt, self.cfg.dissipator_order,
                                      backend=self.backend)
            if bad >= 0:
                raise NumericError("non-finite density matrix", step=self.n * sub + bad)
            total += m.field_per_d * (out[::sub] if sub > 1 else out)
        return total

    def _boundaries(self, n_target):
        stops = [n_target]
        if self.cfg.feedback is not None:
            nc = self.cfg.feedback.Nc
            stops.append((self.n // nc + 1) * nc)
        stride = self.cfg.diagnostics_stride
        if stride > 0:
            stops.append((self.n // stride + 1) * stride)
        if self.cfg.feedback is None:
            stops.append(self.n + 4000)
        return min(stops)

    def advance(self, n_samples: int):
        """Advance by n_samples samples; returns (b_opm, b_ext) for them."""
        b_opm = np.empty(n_samples)
        b_ext = np.empty(n_samples)
        start = self.n
        target = self.n + n_samples
        fb = self.cfg.feedback
        sub = self.sub
        while self.n < target:
            if self.diag is not None and self.n % self.cfg.diagnostics_stride == 0:
                self._record_diagnostics()
            stop = self._boundaries(target)
            m = stop - self.n
            a = self.n - start
            if fb is not None:
                k0 = self.n % fb.Nc
                b = self.pending[k0:k0 + m]
                bq = np.repeat(b, sub) if sub > 1 else b
                sensed = self._evolve(bq, bq, m)
                if fb.noise_rms > 0:
                    sensed = sensed + self.rng.normal(0.0, fb.noise_rms, size=m)
                self.read[k0:k0 + m] = sensed
                b_ext[a:a + m] = b
            else:
                if self._field is None:
                    bq1 = bq3 = np.zeros(m * sub)
                    b_ext[a:a + m] = 0.0
                else:
                    tk = (self.n * sub + np.arange(m * sub)) * self.dt
                    bq1 = np.asarray(self._field(tk + self.dt / 4), dtype=float)
                    bq3 = np.asarray(self._field(tk + 3 * self.dt / 4), dtype=float)
                    b_ext[a:a + m] = self._field(tk[::sub])
                sensed = self._evolve(bq1, bq3, m)
            b_opm[a:a + m] = sensed
            self.n = stop
            peak = np.max(np.abs(sensed)) if m else 0.0
            if peak > self.cfg.blowup_ceiling:
                bad = a + int(np.argmax(np.abs(sensed) > self.cfg.blowup_ceiling))
                raise InstabilityError(
                    f"|B_OPM| exceeded {self.cfg.blowup_ceiling:g} T at t={(start + bad) / self.fs:.4f} s",
                    sample=start + bad,
                    partial=SimTrace(self.fs, b_opm[:a + m].copy(), b_ext[:a + m].copy()))
            if fb is not None and self.n % fb.Nc == 0:
                self.pending = process_chunk(self.loop, self.read, fb)
        return b_opm, b_ext

    def diagnostics(self):
        if self.diag is None:
            return None
        return {k: np.asarray(v) for k, v in self.diag.items()}

    def run(self) -> SimTrace:
        b_opm, b_ext = self.advance(self.cfg.n_samples - self.n)
        return SimTrace(self.fs, b_opm, b_ext, self.diagnostics(), self.cfg.diagnostics_stride)


# ---------------------------------------------------------------- run modes

def _model(sys, geo, relax, eqparams) -> SpeciesModel:
    return build_model(Species(sys, geo, relax, eqparams))


def run_oscillator(sys: SpinSystem, geo: GeometrySample, relax: RelaxationParams,
                   eqparams: EquilibriumParams, runcfg: RunConfig, backend=None) -> SimTrace:
    """Single species under delayed feedback."""
    if runcfg.feedback is None:
        raise ConfigurationError("run_oscillator needs a feedback configuration")
    return Simulation([_model(sys, geo, relax, eqparams)], runcfg, backend).run()


def run_multi_species(species: Sequence, runcfg: RunConfig, backend=None) -> SimTrace:
    """Several species, each with its own state and dissipator, sharing one loop.

    ``species`` holds :class:`Species` objects or (sys, geo, relax, eqparams)
    tuples; each geometry carries that species' concentration.
    """
    models = [s if isinstance(s, SpeciesModel) else build_model(s if isinstance(s, Species) else Species(*s))
              for s in species]
    return Simulation(models, runcfg, backend).run()


def run_free_decay(sys, geo, relax, eqparams, pulse_angle: float, duration: float, fs: float = 2000.0,
                   backend=None, **kw) -> SimTrace:
    """Pulse rho_eq along y and record the unforced decay."""
    cfg = RunConfig(duration=duration, fs=fs, initial_state="pulsed", pulse_angle=pulse_angle, **kw)
    return Simulation([_model(sys, geo, relax, eqparams)], cfg, backend).run()


def default_drive_amplitude(b_equiv: float = 1e-13) -> float:
    """H amplitude (A/m) whose mu_0 H equals ``b_equiv`` tesla."""
    return b_equiv / const.MU_0


def demodulate(x, fs, f, t0=0.0):
    """Complex amplitude X with x(t) ~ Re(X exp(i 2 pi f t)), t = t0 + n/fs."""
    n = np.arange(len(x))
    return 2 * np.mean(x * np.exp(-2j * np.pi * f * (t0 + n / fs)))


def _window_samples(f, fs, min_s):
    """Sample count covering (nearly) an integer number of periods, >= min_s seconds."""
    periods = max(1, int(np.ceil(min_s * f)))
    return round_half_up(periods * fs / f)


def run_driven_response(sys, geo, relax, eqparams, f: float, H_amp: float | None = None,
                        duration: float | None = None, fs: float = 2000.0, window: float = 10.0,
                        tol: float = 0.01, backend=None, model: SpeciesModel | None = None) -> complex:
    """Complex susceptibility chi = M/H at frequency f (no feedback).

    The sample starts at rho_eq and is driven by H(t) = H_amp cos(2 pi f t).
    After settling, the magnetization is demodulated over two consecutive
    windows of whole periods; they must agree to ``tol`` (relative).

    Raises
    ------
    ConvergenceError
        If the two windows disagree or the run is too short for them.
    """
    if model is None:
        model = _model(sys, geo, relax, eqparams)
    if H_amp is None:
        H_amp = default_drive_amplitude()
    nw = _window_samples(f, fs, window)
    if duration is None:
        rates = [coherence_decay_rate(model.system, model.R, n) for n in model.system.line_orders
                 if not np.isinf(model.R.Ts)]
        settle = 8.0 / min(rates) if rates else 0.0
        duration = (round_half_up(settle * fs) + 2 * nw) / fs
    n_total = round_half_up(duration * fs)
    if n_total < 2 * nw:
        raise ConvergenceError("duration shorter than two demodulation windows")
    cfg = RunConfig(duration=n_total / fs, fs=fs, drive=Drive(f, H_amp))
    sim = Simulation([model], cfg, backend)
    sim.advance(n_total - 2 * nw)
    b1, _ = sim.advance(nw)
    b2, _ = sim.advance(nw)
    t1 = (n_total - 2 * nw) / fs
    t2 = (n_total - nw) / fs
    z1 = demodulate(b1, fs, f, t1)
    z2 = demodulate(b2, fs, f, t2)
    scale = max(abs(z2), 1e-30)
    if abs(z1 - z2) > tol * scale and abs(z2) > 1e-9 * const.MU_0 * H_amp:
        raise ConvergenceError(f"driven response at {f} Hz not stationary "
                               f"(window change {abs(z1 - z2) / scale:.3g})")
    M = z2 / (-const.MU_0 * geo.geometric_factor)
    return complex(M / H_amp)

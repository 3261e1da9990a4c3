"""Scenario execution: single runs, sweeps and gain spectra with persisted results.

Every output byte is a function of the validated scenario (its hash) and the
seed. Records carry no timestamps or absolute paths.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import fft, intrinsic_gain_spectrum, peak_metrics, steady_state_amplitude, threshold_gain
from .config import (ScenarioConfig, build_feedback, build_species, config_hash, gain_grid, validate,
                     with_sweep_value)
from .errors import ConfigurationError, FitError, InstabilityError, JOscError, NoOscillationError, NumericError
from .model import build_model
from .propagator import RunConfig, Simulation

TRACE_HEADER = "t_s,B_OPM_pT,B_ext_pT\n"
BLOCK_S = 50.0


@dataclass
class ResultRecord:
    name: str
    config_hash: str
    seed: int
    status: str = "ok"
    message: str = ""
    metrics: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    sweep: dict | None = None
    version: str = __version__

    def to_json(self) -> str:
        return json.dumps(_clean(asdict(self)), indent=2, sort_keys=True) + "\n"


def _clean(obj):
    """JSON-safe copy: non-finite floats become None."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


# ---------------------------------------------------------------- metrics

def moving_amplitude(x, fs, window: float = 1.0, hop: float = 0.1):
    """(t, sqrt(2) * rms) over sliding windows; t is the window centre."""
    x = np.asarray(x, dtype=float)
    L = max(1, int(round(window * fs)))
    h = max(1, int(round(hop * fs)))
    if len(x) < L:
        return np.array([]), np.array([])
    c = np.concatenate([[0.0], np.cumsum(x * x)])
    starts = np.arange(0, len(x) - L + 1, h)
    ms = (c[starts + L] - c[starts]) / L
    return (starts + L / 2) / fs, np.sqrt(2 * np.maximum(ms, 0.0))


def dominant_peak(x, fs, f_max: float, f_min: float = 0.1):
    """f0 and FWHM (Hz) of the strongest line in (f_min, f_max) of a segment."""
    spec = fft(x, fs, "I")
    sel = np.flatnonzero((spec.f > f_min) & (spec.f < f_max))
    if len(sel) == 0:
        raise FitError("segment too short to resolve any line")
    k = sel[np.argmax(np.abs(spec.values[sel]))]
    df = fs / len(x)
    pm = peak_metrics(spec, spec.f[k], search=max(10 * df, 0.05))
    return pm.f0, pm.fwhm


def trace_metrics(b_opm, fs, noise_rms: float, f_max: float, span: float = 30.0,
                  emergence: bool = True) -> dict:
    """Scalar summary of a run (amplitudes in pT, times in s, frequencies in Hz).

    emergence_time_s is the first time the 1 s moving amplitude reaches half
    the steady-state amplitude, reported only when that amplitude exceeds ten
    times the sensor-noise amplitude.
    """
    out = dict(steady_state_amplitude_pT=None, max_burst_amplitude_pT=None, emergence_time_s=None,
               f0_Hz=None, fwhm_Hz=None, duration_s=len(b_opm) / fs)
    if len(b_opm) == 0:
        out["steady_state_amplitude_pT"] = 0.0
        return out
    ss = steady_state_amplitude(b_opm, fs, span=span)
    out["steady_state_amplitude_pT"] = ss * 1e12
    t, amp = moving_amplitude(b_opm, fs)
    if len(amp):
        out["max_burst_amplitude_pT"] = float(amp.max()) * 1e12
        floor = 10 * math.sqrt(2) * max(noise_rms, 1e-16)
        if emergence and ss > floor:
            hit = np.flatnonzero(amp >= 0.5 * ss)
            if len(hit):
                out["emergence_time_s"] = float(t[hit[0]])
    seg = b_opm[len(b_opm) // 2:]
    if len(seg) >= 4:
        try:
            out["f0_Hz"], out["fwhm_Hz"] = dominant_peak(seg, fs, f_max)
        except (FitError, NoOscillationError):
            pass
    return out


# ---------------------------------------------------------------- single run

class _TraceWriter:
    def __init__(self, path, fs):
        self.fh = open(path, "w", newline="")
        self.fh.write(TRACE_HEADER)
        self.fs = fs
        self.n = 0

    def write(self, b_opm, b_ext):
        t = (self.n + np.arange(len(b_opm))) / self.fs
        np.savetxt(self.fh, np.column_stack([t, b_opm * 1e12, b_ext * 1e12]),
                   fmt=["%.6f", "%.9e", "%.9e"], delimiter=",")
        self.n += len(b_opm)

    def close(self):
        self.fh.close()


def _runcfg(cfg: ScenarioConfig) -> RunConfig:
    run = cfg.run
    fb = build_feedback(cfg) if run.mode == "oscillator" else None
    init = "pulsed" if run.mode == "free-decay" else run.initial_state
    return RunConfig(duration=run.duration_s, fs=cfg.feedback.fs_Hz if fb is None else None, feedback=fb,
                     initial_state=init, pulse_angle=math.radians(run.pulse_angle_deg),
                     dissipator_order=run.dissipator_order, diagnostics_stride=cfg.outputs.diagnostics_stride)


def line_frequency_limit(cfg: ScenarioConfig) -> float:
    fmax = max(sp.J_Hz * (2 if sp.model == "a3x" else 1) for sp in cfg.species)
    return 1.5 * fmax + 1.0


def run_scenario(cfg: ScenarioConfig, out_dir=None, prefix: str = "", backend=None):
    """Run one scenario; returns (ResultRecord, b_opm, b_ext, diagnostics).

    With ``out_dir`` the trace is streamed to ``<prefix>trace.csv`` block by
    block, and spectrum, diagnostics, raw dump and record are written next to it.
    Instability ends the run early with status "unstable".
    """
    seed = cfg.feedback.seed
    rec = ResultRecord(cfg.name, config_hash(cfg), seed)
    runcfg = _runcfg(cfg)
    models = [build_model(s) for s in build_species(cfg)]
    sim = Simulation(models, runcfg, backend)
    fs = runcfg.sample_rate
    out = Path(out_dir) if out_dir is not None else None
    want_csv = "csv" in cfg.outputs.formats
    writer = None
    if out is not None and want_csv:
        writer = _TraceWriter(out / f"{prefix}trace.csv", fs)
        rec.artifacts["trace"] = f"{prefix}trace.csv"
    parts_o, parts_e = [], []
    block = max(1, int(round(BLOCK_S * fs)))
    remaining = runcfg.n_samples
    try:
        while remaining > 0:
            m = min(block, remaining)
            try:
                bo, be = sim.advance(m)
            except InstabilityError as exc:
                if exc.partial is not None:
                    parts_o.append(exc.partial.b_opm)
                    parts_e.append(exc.partial.b_ext)
                    if writer:
                        writer.write(exc.partial.b_opm, exc.partial.b_ext)
                rec.status, rec.message = "unstable", str(exc)
                break
            except NumericError as exc:
                rec.status, rec.message = "unstable", str(exc)
                break
            parts_o.append(bo)
            parts_e.append(be)
            if writer:
                writer.write(bo, be)
            remaining -= m
    finally:
        if writer:
            writer.close()
    b_opm = np.concatenate(parts_o) if parts_o else np.zeros(0)
    b_ext = np.concatenate(parts_e) if parts_e else np.zeros(0)
    noise = cfg.feedback.noise_rms_pT * 1e-12 if runcfg.feedback is not None else 0.0
    rec.metrics = trace_metrics(b_opm, fs, noise, line_frequency_limit(cfg), cfg.run.steady_span_s,
                                emergence=cfg.run.mode == "oscillator")
    diag = sim.diagnostics()
    if out is not None:
        _write_artifacts(cfg, rec, out, prefix, fs, b_opm, b_ext, diag)
    return rec, b_opm, b_ext, diag


def _write_artifacts(cfg, rec, out: Path, prefix, fs, b_opm, b_ext, diag):
    from .propagator import SimTrace

    tr = SimTrace(fs, b_opm, b_ext, diag, cfg.outputs.diagnostics_stride)
    if "csv" in cfg.outputs.formats:
        if diag:
            tr.write_diagnostics_csv(out / f"{prefix}diagnostics.csv")
            rec.artifacts["diagnostics"] = f"{prefix}diagnostics.csv"
        seg = b_opm[len(b_opm) // 2:]
        if cfg.outputs.spectrum and len(seg) >= 2:
            fft(seg, fs, "I").write_csv(out / f"{prefix}spectrum.csv", f_max=line_frequency_limit(cfg))
            rec.artifacts["spectrum"] = f"{prefix}spectrum.csv"
    if cfg.outputs.dump_raw:
        tr.write_raw(out / f"{prefix}trace.raw")
        rec.artifacts["raw"] = f"{prefix}trace.raw"
    if "json" in cfg.outputs.formats:
        rec.artifacts["record"] = f"{prefix}record.json"
        (out / f"{prefix}record.json").write_text(rec.to_json())


# ---------------------------------------------------------------- sweep

SWEEP_COLUMNS = ("steady_state_amplitude_pT", "max_burst_amplitude_pT", "emergence_time_s", "f0_Hz", "fwhm_Hz")


def _sweep_point(args):
    data, param, value, out_dir, prefix, backend = args
    cfg = with_sweep_value(validate(data), param, value)
    try:
        rec, *_ = run_scenario(cfg, out_dir, prefix, backend)
    except (JOscError, ValueError, ArithmeticError) as exc:
        rec = ResultRecord(cfg.name, config_hash(cfg), cfg.feedback.seed, status="error",
                           message=f"{type(exc).__name__}: {exc}")
    rec.sweep = {"param": param, "value": value}
    return value, rec


def run_sweep(cfg: ScenarioConfig, param: str, values, out_dir=None, parallel: int = 1, backend=None):
    """One run per value; returns records sorted by value.

    Per-point failures are recorded in the point's status and do not stop the
    sweep. Points share no state, so the result does not depend on ``parallel``.
    """
    values = sorted(float(v) for v in values)
    data = cfg.model_dump()
    data["sweep"] = None
    tasks = [(data, param, v, out_dir, f"point{i:03d}_", backend) for i, v in enumerate(values)]
    if parallel > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as ex:
            results = list(ex.map(_sweep_point, tasks))
    else:
        results = [_sweep_point(t) for t in tasks]
    results.sort(key=lambda r: r[0])
    recs = [r for _, r in results]
    if out_dir is not None:
        write_sweep_table(Path(out_dir) / "sweep.csv", param, recs)
    return recs


def write_sweep_table(path, param, recs):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(["param", "value", "status", "config_hash", *SWEEP_COLUMNS]) + "\n")
        for r in recs:
            cells = [param, repr(float(r.sweep["value"])), r.status, r.config_hash]
            for c in SWEEP_COLUMNS:
                v = r.metrics.get(c)
                cells.append("" if v is None or not math.isfinite(v) else f"{v:.9e}")
            fh.write(",".join(cells) + "\n")


# ---------------------------------------------------------------- gain spectrum

def run_gain_spectrum(cfg: ScenarioConfig, out_dir=None, parallel: int = 1, grid=None, backend=None) -> dict:
    """G_int on the configured grid for the first species, plus values at the lines.

    The summary reports G_int at each line frequency n J and the matching
    threshold |G_ext| = 1 / G_int.
    """
    if len(cfg.species) != 1:
        raise ConfigurationError("gain-spectrum takes a single species")
    sp = build_species(cfg)[0]
    gs = cfg.gain_spectrum
    f_grid = gain_grid(cfg) if grid is None else np.asarray(grid, dtype=float)
    kw = {} if gs.method == "linear" else {"window": gs.window_s, "fs": cfg.feedback.fs_Hz}
    if backend is not None and gs.method == "time":
        kw["backend"] = backend
    spec = intrinsic_gain_spectrum(sp.system, sp.geometry, sp.relaxation, sp.equilibrium, f_grid,
                                   method=gs.method, parallel=parallel, **kw)
    lines = [n * sp.system.J for n in sp.system.line_orders]
    at_lines = intrinsic_gain_spectrum(sp.system, sp.geometry, sp.relaxation, sp.equilibrium, lines,
                                       method=gs.method, parallel=parallel, **kw)
    peaks = []
    for n, f, g in zip(sp.system.line_orders, lines, at_lines.G_int):
        try:
            thr = threshold_gain(float(g))
        except NoOscillationError:
            thr = math.inf
        peaks.append({"line": f"{n}J", "f_Hz": f, "G_int": float(g), "threshold_G_ext": thr})
    summary = {"name": cfg.name, "config_hash": config_hash(cfg), "method": gs.method, "peaks": peaks,
               "version": __version__}
    if out_dir is not None:
        out = Path(out_dir)
        spec.write_csv(out / "gain_spectrum.csv")
        summary["artifacts"] = {"gain_spectrum": "gain_spectrum.csv", "record": "gain_summary.json"}
        (out / "gain_summary.json").write_text(json.dumps(_clean(summary), indent=2, sort_keys=True) + "\n")
    return _clean(summary) | {"spectrum": spec}

"""Command-line entry point.

Verbs: simulate, sweep, gain-spectrum, analyze, version. Exit codes: 0 ok,
2 configuration error, 3 numeric instability, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigurationError, FitError, InstabilityError, NoOscillationError

EXIT_OK, EXIT_CONFIG, EXIT_UNSTABLE, EXIT_IO = 0, 2, 3, 4


def _common(p, config=True):
    if config:
        p.add_argument("--config", required=True, help="scenario YAML file or shipped scenario name")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="set a dotted config key, e.g. feedback.tau_ms=160 (repeatable)")
        p.add_argument("--seed", type=int, default=None, help="noise seed (replaces feedback.seed)")
    p.add_argument("--out", default=None, help="output directory (default $JOSC_OUT or ./out)")
    p.add_argument("--parallel", type=int, default=1, help="worker processes")
    p.add_argument("--backend", choices=["cython", "python"], default=None, help=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="joscillator", description="Zero-field J-coupling oscillator simulator")
    sub = ap.add_subparsers(dest="verb", required=True)

    _common(sub.add_parser("simulate", help="run one scenario"))

    p = sub.add_parser("sweep", help="run a scenario over a list of parameter values")
    _common(p)
    p.add_argument("--param", default=None, help="tau (ms), G_ext, noise_rms (pT), Ts (s) or duration (s)")
    p.add_argument("--values", default=None, help="comma-separated values; empty string for none")

    p = sub.add_parser("gain-spectrum", help="intrinsic gain versus frequency")
    _common(p)
    p.add_argument("--f-min", type=float, default=None)
    p.add_argument("--f-max", type=float, default=None)
    p.add_argument("--points", type=int, default=None)
    p.add_argument("--method", choices=["time", "linear"], default=None)

    p = sub.add_parser("analyze", help="spectra and metrics of a trace CSV")
    p.add_argument("what", choices=["fft", "peaks", "snr"])
    p.add_argument("--trace", required=True, help="trace CSV (t_s,B_OPM_pT[,B_ext_pT])")
    _common(p, config=False)
    p.add_argument("--t0", type=float, default=0.0, help="segment start (s)")
    p.add_argument("--t1", type=float, default=None, help="segment end (s)")
    p.add_argument("--convention", choices=["I", "II"], default="I")
    p.add_argument("--f-max", type=float, default=None, help="highest frequency written (fft)")
    p.add_argument("--f0", type=float, action="append", default=None, help="line frequency guess (peaks)")
    p.add_argument("--search", type=float, default=0.5)
    p.add_argument("--fit", choices=["direct-halfmax", "lorentzian"], default="direct-halfmax")
    p.add_argument("--mode", choices=["magnitude", "real"], default="magnitude")
    p.add_argument("--durations", default=None, help="comma-separated durations in s (snr)")
    p.add_argument("--signal-band", type=float, nargs=2, default=None, metavar=("LO", "HI"))
    p.add_argument("--noise-band", type=float, nargs=2, default=(8.0, 10.0), metavar=("LO", "HI"))

    sub.add_parser("version", help="print the version")
    return ap


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get("JOSC_OUT") or "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args):
    from .config import load_config
    return load_config(args.config, args.override, args.seed)


def _simulate(args) -> int:
    from .harness import run_scenario
    cfg = _load(args)
    out = _out_dir(args)
    rec, *_ = run_scenario(cfg, out, backend=args.backend)
    print(rec.to_json(), end="")
    return EXIT_UNSTABLE if rec.status == "unstable" else EXIT_OK


def _sweep(args) -> int:
    from .harness import run_sweep
    cfg = _load(args)
    param = args.param or (cfg.sweep.param if cfg.sweep else None)
    if param is None:
        raise ConfigurationError("no sweep parameter: give --param or a sweep section")
    if args.values is not None:
        try:
            values = [float(v) for v in args.values.split(",") if v.strip()]
        except ValueError:
            raise ConfigurationError(f"--values {args.values!r} is not a comma-separated number list") from None
    else:
        values = list(cfg.sweep.values) if cfg.sweep and cfg.sweep.param == param else []
    from .config import SWEEP_PARAMS
    if param not in SWEEP_PARAMS:
        raise ConfigurationError(f"sweep parameter {param!r} not in {SWEEP_PARAMS}")
    out = _out_dir(args)
    recs = run_sweep(cfg, param, values, out, args.parallel, backend=args.backend)
    for r in recs:
        print(f"{param}={r.sweep['value']:g} status={r.status} "
              f"ss_amp_pT={r.metrics.get('steady_state_amplitude_pT')}")
    return EXIT_OK


def _gain(args) -> int:
    from .config import validate
    from .harness import run_gain_spectrum
    cfg = _load(args)
    data = cfg.model_dump()
    for key, val in (("f_min_Hz", args.f_min), ("f_max_Hz", args.f_max), ("points", args.points),
                     ("method", args.method)):
        if val is not None:
            data["gain_spectrum"][key] = val
    cfg = validate(data)
    summary = run_gain_spectrum(cfg, _out_dir(args), args.parallel, backend=args.backend)
    summary.pop("spectrum")
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def _analyze(args) -> int:
    from .analysis import fft, peak_metrics, snr_scaling
    from .propagator import SimTrace
    try:
        tr = SimTrace.read_csv(args.trace)
    except ValueError as exc:
        print(f"error: malformed trace: {exc}", file=sys.stderr)
        return EXIT_IO
    seg = tr.segment(args.t0, args.t1)
    out = _out_dir(args)
    if args.what == "fft":
        spec = fft(seg, convention=args.convention)
        spec.write_csv(out / "spectrum.csv", f_max=args.f_max)
        print(out / "spectrum.csv")
    elif args.what == "peaks":
        if not args.f0:
            raise ConfigurationError("peaks needs at least one --f0")
        spec = fft(seg, convention=args.convention)
        rows = []
        for f in args.f0:
            try:
                pm = peak_metrics(spec, f, fit=args.fit, mode=args.mode, search=args.search)
                rows.append({"f_guess_Hz": f, "status": "ok", "f0_Hz": pm.f0, "amplitude": pm.amplitude,
                             "fwhm_Hz": pm.fwhm, "integral_pT": pm.integral * 1e12, "phase_rad": pm.phase})
            except (FitError, NoOscillationError) as exc:
                rows.append({"f_guess_Hz": f, "status": "no-peak", "message": str(exc)})
        text = json.dumps({"convention": args.convention, "T_s": spec.T, "peaks": rows}, indent=2)
        (out / "peaks.json").write_text(text + "\n")
        print(text)
    else:
        if not args.durations or not args.signal_band:
            raise ConfigurationError("snr needs --durations and --signal-band")
        durations = [float(v) for v in args.durations.split(",")]
        table = snr_scaling(seg, durations, tuple(args.signal_band), tuple(args.noise_band),
                            convention=args.convention)
        with open(out / "snr.csv", "w") as fh:
            fh.write("T_s,amplitude,noise_floor,snr\n")
            for r in table.rows():
                fh.write(f"{r['T_s']!r},{r['amplitude']:.9e},{r['noise_floor']:.9e},{r['snr']:.9e}\n")
        text = json.dumps({"exponents": {k: (v if np.isfinite(v) else None) for k, v in table.exponents.items()},
                           "unbounded": table.unbounded}, indent=2, sort_keys=True)
        (out / "snr.json").write_text(text + "\n")
        print(text)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.verb == "version":
        print(f"joscillator {__version__}")
        return EXIT_OK
    handlers = {"simulate": _simulate, "sweep": _sweep, "gain-spectrum": _gain, "analyze": _analyze}
    try:
        return handlers[args.verb](args)
    except ConfigurationError as exc:
        print(f"error: configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InstabilityError as exc:
        print(f"error: numeric instability: {exc}", file=sys.stderr)
        return EXIT_UNSTABLE
    except OSError as exc:
        print(f"error: I/O: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

"""Emergence classification, threshold bisection and delay-window search.

A run "emerges" at a line when the loop makes that line grow from a small
seed. Classification uses noise-free runs seeded by a small pulse of rho_eq,
so the outcome is deterministic: the sign of the fitted exponential growth
rate of the demodulated line envelope decides. The fit window ends before
any line leaves the small-signal regime.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .analysis import line_envelope, linear_susceptibility
from .errors import InstabilityError
from .feedback import FeedbackConfig
from .model import SpeciesModel
from .propagator import RunConfig, Simulation


@dataclass(frozen=True)
class EmergenceProbe:
    """Settings of the seeded, noise-free classification run.

    ``fit`` is the (start, end) time window of the growth-rate fit in seconds.
    The fit window is cut short once any line has grown by ``gain_factor``
    over its seeded amplitude, which keeps it in the small-signal regime.
    """

    fit: tuple = (30.0, 120.0)
    seed_angle: float = 1e-3
    average: float | None = None
    gain_factor: float = 10.0


@dataclass(frozen=True)
class EmergenceResult:
    emerged: bool
    rate: float
    amplification: float


def _average_window(model: SpeciesModel, probe: EmergenceProbe) -> float:
    if probe.average is not None:
        return probe.average
    # Blackman sidelobes beyond 3/average are < -58 dB; 4/J keeps neighbours (J apart) out
    return 4.0 / model.system.J if len(model.system.line_orders) > 1 else 1.0


def classify(model: SpeciesModel, fb: FeedbackConfig, lines, probe: EmergenceProbe = EmergenceProbe(),
             backend=None) -> dict:
    """Emergence of each line frequency in ``lines`` for one loop setting.

    Returns a dict frequency -> :class:`EmergenceResult`.
    """
    fb = replace(fb, noise_rms=0.0)
    fs = fb.fs
    t_end = probe.fit[1]
    cfg = RunConfig(duration=t_end, feedback=fb, initial_state="pulsed", pulse_angle=probe.seed_angle)
    sim = Simulation([model], cfg, backend)
    try:
        x, _ = sim.advance(cfg.n_samples)
    except InstabilityError as exc:
        # runaway growth is emergence by definition
        x = exc.partial.b_opm if exc.partial is not None else np.zeros(0)
        return {f: EmergenceResult(True, np.inf, np.inf) for f in lines}
    avg = _average_window(model, probe)
    env = {}
    for f in lines:
        t, z = line_envelope(x, fs, f, avg)
        a = np.abs(z)
        early = a[(t >= avg) & (t <= avg + 2.0)]
        env[f] = a / (early.mean() if len(early) and early.mean() > 0 else max(a[0], 1e-300))
    # fit only while every line is still in the linear (small-signal) regime
    grown = np.max([env[f] for f in lines], axis=0) > probe.gain_factor
    t_end = t[np.argmax(grown)] if grown.any() else probe.fit[1]
    t_end = min(t_end, probe.fit[1])
    t_start = min(probe.fit[0], max(avg, 0.5 * t_end))
    out = {}
    for f in lines:
        a = env[f]
        sel = (t >= t_start) & (t <= t_end) & (a > 0)
        rate = float(np.polyfit(t[sel], np.log(a[sel]), 1)[0]) if sel.sum() >= 3 else -np.inf
        out[f] = EmergenceResult(bool(rate > 0), rate, float(a.max()))
    return out


def emerges(model, fb, f, probe=EmergenceProbe(), backend=None) -> bool:
    """Whether line f emerges. Every line of the system is tracked so that the
    fit window closes before any of them saturates."""
    lines = sorted({n * model.system.J for n in model.system.line_orders} | {f})
    return classify(model, fb, lines, probe, backend)[f].emerged


def predicted_threshold(model: SpeciesModel, tau: float, f: float, sign: float) -> float:
    """|G_ext| at which G_ext G_int sin(phi) = -1 (linear theory, bare line frequency)."""
    chi = linear_susceptibility(model, [f])[0]
    G_int = model.species.geometry.geometric_factor * abs(chi)
    phi = 2 * np.pi * f * tau + (np.pi if sign < 0 else 0.0)
    s = -np.sin(phi)
    return np.inf if s <= 0 else 1.0 / (G_int * s)


def bisect_threshold(model, tau, f, sign=+1, lo=None, hi=None, rtol=0.01, fb_kw=None,
                     probe=EmergenceProbe(), backend=None, max_iter=40):
    """Smallest |G_ext| (with the given sign) at which line f emerges.

    Returns (threshold, (lo, hi)) with lo not emerging and hi emerging.
    """
    fb_kw = dict(fb_kw or {})
    guess = predicted_threshold(model, tau, f, sign)
    if not np.isfinite(guess):
        guess = 10.0
    lo = 0.7 * guess if lo is None else lo
    hi = 1.4 * guess if hi is None else hi

    def test(g):
        return emerges(model, FeedbackConfig(tau=tau, G_ext=sign * g, **fb_kw), f, probe, backend)

    for _ in range(max_iter):
        if not test(lo):
            break
        hi, lo = lo, lo / 2
    for _ in range(max_iter):
        if test(hi):
            break
        lo, hi = hi, hi * 2
    while (hi - lo) > rtol * hi:
        mid = 0.5 * (lo + hi)
        if test(mid):
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi), (lo, hi)


def bisect_delay_edge(model, G, f, tau_out, tau_in, fs=2000.0, fb_kw=None, probe=EmergenceProbe(),
                      backend=None):
    """Edge of an emergence window in tau, to one sample.

    ``tau_out`` must not emerge and ``tau_in`` must; the returned edge is the
    midpoint of the final one-sample bracket.
    """
    fb_kw = dict(fb_kw or {})

    def test(tau):
        return emerges(model, FeedbackConfig(tau=tau, G_ext=G, fs=fs, **fb_kw), f, probe, backend)

    if test(tau_out) or not test(tau_in):
        raise ValueError(f"bracket ({tau_out}, {tau_in}) s does not straddle the window edge")
    a, b = round(tau_out * fs), round(tau_in * fs)
    while abs(b - a) > 1:
        m = (a + b) // 2
        if test(m / fs):
            b = m
        else:
            a = m
    return 0.5 * (a + b) / fs


def predicted_window(model, G, f, G_int=None):
    """Phase interval (pi + asin(x), 2 pi - asin(x)), x = 1/(|G| G_int), or None."""
    if G_int is None:
        G_int = model.species.geometry.geometric_factor * abs(linear_susceptibility(model, [f])[0])
    x = 1.0 / (abs(G) * G_int)
    if x >= 1:
        return None
    return np.pi + np.arcsin(x), 2 * np.pi - np.arcsin(x)


def phase_to_tau(phi, f, sign, k=0):
    """Delay giving loop phase phi + 2 pi k at frequency f."""
    base = phi - (np.pi if sign < 0 else 0.0) + 2 * np.pi * k
    return base / (2 * np.pi * f)


def delay_window(model, G, f, tau_lo, tau_hi, bracket=0.015, fs=2000.0, fb_kw=None,
                 probe=EmergenceProbe(), backend=None):
    """Both edges (s) of one emergence window in tau, each bisected to one sample.

    ``tau_lo`` and ``tau_hi`` are estimates of the edges (e.g. from
    :func:`predicted_window`); each must lie within ``bracket`` seconds of the
    true edge.
    """
    lo = bisect_delay_edge(model, G, f, tau_lo - bracket, tau_lo + bracket, fs, fb_kw, probe, backend)
    hi = bisect_delay_edge(model, G, f, tau_hi + bracket, tau_hi - bracket, fs, fb_kw, probe, backend)
    return lo, hi

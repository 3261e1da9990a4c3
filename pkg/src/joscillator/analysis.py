"""Spectral and scalar analysis of traces.

FFT conventions: I divides the raw DFT by N (amplitude units of x), II
multiplies it by 1/fs (amplitude * seconds). Spectra keep the analyzed samples
so peak shapes can be refined on a fine frequency grid (rectangular window,
no zero-filling of the returned grid).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.signal import zoom_fft

from . import constants as const
from .errors import FitError, NoOscillationError
from .feedback import GeometrySample

#: FWHM * T of the magnitude (and centred real-part) spectrum of a rectangular-windowed sinusoid
RECT_LINEWIDTH = 1.2067
ROUNDOFF_FLOOR = 1e-12  # noise floor / amplitude treated as zero


@dataclass(eq=False)
class Spectrum:
    """Two-sided spectrum on the grid k*fs/N (``numpy.fft.fftfreq`` order)."""

    f: np.ndarray
    values: np.ndarray
    convention: str
    T: float
    fs: float
    samples: np.ndarray | None = field(default=None, repr=False)
    window: str = "rectangular"

    @property
    def N(self):
        return len(self.f)

    def scale(self):
        return 1.0 / self.N if self.convention == "I" else 1.0 / self.fs

    def to_convention(self, convention: str) -> "Spectrum":
        if convention == self.convention:
            return self
        factor = self.T if convention == "II" else 1.0 / self.T
        return Spectrum(self.f, self.values * factor, convention, self.T, self.fs, self.samples)

    def refine(self, f_grid, centre=False):
        """Rectangular-window DTFT on an arbitrary uniform grid, in this convention.

        With ``centre`` the time origin is the middle of the segment instead of
        its first sample.
        """
        if self.samples is None:
            raise FitError("spectrum holds no samples; cannot refine")
        f_grid = np.asarray(f_grid, dtype=float)
        if len(f_grid) == 1:
            n = np.arange(self.N)
            X = np.array([np.sum(self.samples * np.exp(-2j * np.pi * f_grid[0] * n / self.fs))])
        else:
            step = f_grid[1] - f_grid[0]
            X = zoom_fft(self.samples, [f_grid[0], f_grid[0] + step * len(f_grid)], m=len(f_grid),
                         fs=self.fs, endpoint=False)
        if centre:
            X = X * np.exp(2j * np.pi * f_grid * (self.N - 1) / (2 * self.fs))
        return X * self.scale()

    def write_csv(self, path, f_max: float | None = None):
        """Rows sorted by frequency; with ``f_max`` only 0 <= f <= f_max."""
        with open(path, "w") as fh:
            fh.write(f"# convention={self.convention} T_s={self.T!r} fs_Hz={self.fs!r}\n")
            fh.write("f_Hz,re,im,abs\n")
            order = np.argsort(self.f, kind="stable")
            if f_max is not None:
                order = order[(self.f[order] >= 0) & (self.f[order] <= f_max)]
            np.savetxt(fh, np.column_stack([self.f[order], self.values[order].real, self.values[order].imag,
                                            np.abs(self.values[order])]), fmt="%.12e", delimiter=",")


def fft(x, fs: float | None = None, convention: str = "I") -> Spectrum:
    """Spectrum of a real segment.

    ``x`` is an array (then ``fs`` is required) or a trace with ``fs`` and
    ``b_opm`` attributes.
    """
    if hasattr(x, "b_opm"):
        fs = x.fs
        x = x.b_opm
    if fs is None:
        raise ValueError("fs required")
    x = np.asarray(x, dtype=float)
    N = len(x)
    if N < 2:
        raise ValueError("segment must hold at least two samples")
    if convention not in ("I", "II"):
        raise ValueError("convention must be 'I' or 'II'")
    X = np.fft.fft(x)
    X = X / N if convention == "I" else X / fs
    return Spectrum(np.fft.fftfreq(N, 1 / fs), X, convention, N / fs, float(fs), x)


@dataclass(frozen=True)
class PeakMetrics:
    """Peak position (Hz), height (spectrum units), FWHM (Hz) and integral.

    ``integral`` is a time-domain amplitude in the units of the trace: the fit
    area 2|a| for Lorentzian fits, and 2 x (Convention-I height) x
    (FWHM / rectangular-window width) for direct half-maximum measurements, so
    that a measurement-limited sinusoid of amplitude A returns A.
    """

    f0: float
    amplitude: float
    fwhm: float
    integral: float
    phase: float = 0.0


def _search_band(spec, f_guess, search):
    mask = np.abs(spec.f - f_guess) <= search
    if not mask.any():
        raise FitError(f"no spectral points within {search} Hz of {f_guess} Hz")
    return np.flatnonzero(mask)


def _half_max_crossings(f, y, k, half):
    i = k
    while i > 0 and y[i] > half:
        i -= 1
    j = k
    while j < len(y) - 1 and y[j] > half:
        j += 1
    if y[i] > half or y[j] > half:
        return None
    fl = f[i] + (half - y[i]) * (f[i + 1] - f[i]) / (y[i + 1] - y[i])
    fr = f[j - 1] + (half - y[j - 1]) * (f[j] - f[j - 1]) / (y[j] - y[j - 1])
    return fl, fr


def peak_metrics(spec: Spectrum, f_guess: float, fit: str = "direct-halfmax", mode: str = "magnitude",
                 search: float = 0.5, snr_min: float = 4.0, fit_window: float | None = None) -> PeakMetrics:
    """Locate and characterize one line near ``f_guess``.

    Parameters
    ----------
    fit : {"direct-halfmax", "lorentzian"}
    mode : {"magnitude", "real"}
        Direct mode only. "real" takes the real part after moving the time
        origin to the segment centre and rotating the peak phase to zero.
    search : float
        Half-width (Hz) of the band searched for the maximum.
    snr_min : float
        Required ratio of peak height to the median magnitude of the
        positive-frequency spectrum (the noise floor for line spectra).
    """
    idx = _search_band(spec, f_guess, search)
    mag = np.abs(spec.values[idx])
    k = idx[np.argmax(mag)]
    floor = np.median(np.abs(spec.values[spec.f > 0])) if np.any(spec.f > 0) else 0.0
    if not np.abs(spec.values[k]) > snr_min * floor:
        raise FitError(f"no peak above the noise floor near {f_guess} Hz")
    if fit == "lorentzian":
        return _lorentzian_fit(spec, spec.f[k], fit_window if fit_window is not None else search)
    if fit != "direct-halfmax":
        raise ValueError(f"unknown fit {fit!r}")
    if mode not in ("magnitude", "real"):
        raise ValueError(f"unknown mode {mode!r}")
    df = spec.fs / spec.N
    if spec.samples is None:
        f, X = spec.f[idx], spec.values[idx]
        order = np.argsort(f)
        f, X = f[order], X[order]
        kk = int(np.argmax(np.abs(X)))
        phase = np.angle(X[kk])
        y = np.abs(X) if mode == "magnitude" else np.real(X * np.exp(-1j * phase))
        res = _half_max_crossings(f, y, kk, y[kk] / 2)
        if res is None:
            raise FitError("half maximum not bracketed")
        fwhm = res[1] - res[0]
        return PeakMetrics(float(f[kk]), float(y[kk]), fwhm, _direct_integral(spec, y[kk], fwhm), float(phase))
    width = 4 * df
    fc = spec.f[k]
    while True:
        n = 257
        grid = fc - width + 2 * width * np.arange(n) / (n - 1)
        X = spec.refine(grid, centre=(mode == "real"))
        kk = int(np.argmax(np.abs(X)))
        if 0 < kk < n - 1 or width > search:
            break
        fc = grid[kk]
        width *= 2
    # second, finer pass centred on the maximum
    fpk = grid[kk]
    span = width
    for _ in range(6):
        grid = fpk - span + 2 * span * np.arange(n) / (n - 1)
        X = spec.refine(grid, centre=(mode == "real"))
        kk = int(np.argmax(np.abs(X)))
        phase = float(np.angle(X[kk]))
        y = np.abs(X) if mode == "magnitude" else np.real(X * np.exp(-1j * phase))
        res = _half_max_crossings(grid, y, kk, y[kk] / 2)
        if res is not None:
            break
        span *= 2
        fpk = grid[kk]
        if span > 2 * search:
            raise FitError("half maximum not bracketed within the search band")
    fwhm = res[1] - res[0]
    # parabolic vertex for the peak position
    if 0 < kk < n - 1:
        y0, y1, y2 = y[kk - 1], y[kk], y[kk + 1]
        den = y0 - 2 * y1 + y2
        shift = 0.5 * (y0 - y2) / den if den != 0 else 0.0
        f0 = grid[kk] + shift * (grid[1] - grid[0])
    else:
        f0 = grid[kk]
    return PeakMetrics(float(f0), float(y[kk]), float(fwhm), _direct_integral(spec, y[kk], fwhm), phase)


def _direct_integral(spec, height, fwhm):
    height_I = height if spec.convention == "I" else height / spec.T
    return float(2 * height_I * fwhm * spec.T / RECT_LINEWIDTH)


def _lorentzian_fit(spec: Spectrum, f_peak: float, window: float) -> PeakMetrics:
    """Complex Lorentzian a/(G + i 2 pi (f - f0)) plus a linear complex baseline.

    Fitted to the Convention-II spectrum; (f0, G) by nonlinear least squares,
    (a, c0, c1) by linear least squares at every iterate.
    """
    s2 = spec.to_convention("II")
    mask = np.abs(s2.f - f_peak) <= window
    f = s2.f[mask]
    X = s2.values[mask]
    if len(f) < 6:
        raise FitError("too few spectral points for a Lorentzian fit")
    scale = np.abs(X).max()
    Xs = X / scale

    def design(p):
        f0, lg = p
        g = np.exp(lg)
        return np.column_stack([1 / (g + 2j * np.pi * (f - f0)), np.ones_like(f), f - f_peak])

    def resid(p):
        A = design(p)
        coef, *_ = np.linalg.lstsq(A, Xs, rcond=None)
        r = A @ coef - Xs
        return np.concatenate([r.real, r.imag])

    mag = np.abs(Xs)
    k = int(np.argmax(mag))
    res = _half_max_crossings(f, mag, k, mag[k] / 2)
    fw = (res[1] - res[0]) if res is not None else 2 * (f[1] - f[0])
    g0 = max(np.pi * fw / np.sqrt(3), np.pi / s2.T)
    try:
        sol = optimize.least_squares(resid, [f[k], np.log(g0)], x_scale=[f[1] - f[0], 1.0],
                                     xtol=1e-12, ftol=1e-12, max_nfev=500)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise FitError(f"Lorentzian fit failed: {exc}") from exc
    f0, lg = sol.x
    g = np.exp(lg)
    if not sol.success or not np.isfinite(g) or abs(f0 - f_peak) > window:
        raise FitError(f"Lorentzian fit did not converge: {sol.message}")
    coef, *_ = np.linalg.lstsq(design(sol.x), Xs, rcond=None)
    a = coef[0] * scale
    height = abs(a) / g
    if spec.convention == "I":
        height /= spec.T
    return PeakMetrics(float(f0), float(height), float(g / np.pi), float(2 * abs(a)), float(np.angle(a)))


# ---------------------------------------------------------------- time-domain metrics

def _series(trace, fs):
    if hasattr(trace, "b_opm"):
        return np.asarray(trace.b_opm, dtype=float), float(trace.fs)
    if fs is None:
        raise ValueError("fs required for a bare array")
    return np.asarray(trace, dtype=float), float(fs)


def band_limit(x, fs, band):
    """Zero all FFT components outside |f| in [band[0], band[1]]."""
    X = np.fft.rfft(x)
    f = np.fft.rfftfreq(len(x), 1 / fs)
    X[(f < band[0]) | (f > band[1])] = 0
    return np.fft.irfft(X, len(x))


def is_stationary(x, fs, span: float = 30.0, block: float = 10.0, tol: float = 0.01) -> bool:
    """True if the rms of consecutive ``block``-second blocks over the last
    ``span`` seconds agree to ``tol`` (relative). Short spans use three blocks."""
    block = min(block, span / 3)
    nb = int(round(block * fs))
    k = int(round(span / block))
    if nb == 0 or k == 0 or len(x) < k * nb:
        return False
    tail = x[len(x) - k * nb:].reshape(k, nb)
    rms = np.sqrt(np.mean(tail**2, axis=1))
    if rms.max() == 0:
        return True
    return bool((rms.max() - rms.min()) <= tol * rms.max())


def steady_state_amplitude(trace, fs: float | None = None, band=None, span: float = 30.0,
                           fallback: float = 10.0, return_rule: bool = False):
    """Sinusoid amplitude rms * sqrt(2) at the end of a trace.

    Uses the last ``span`` seconds when they are stationary to 1 %, otherwise
    the last ``fallback`` seconds. ``band`` (Hz) optionally isolates one line.
    """
    x, fs = _series(trace, fs)
    if band is not None and len(x):
        x = band_limit(x, fs, band)
    if is_stationary(x, fs, span):
        rule, n = "stationary", int(round(span * fs))
    else:
        rule, n = "last-window", int(round(fallback * fs))
    seg = x[max(0, len(x) - n):]
    amp = float(np.sqrt(2 * np.mean(seg**2))) if len(seg) else 0.0
    return (amp, rule) if return_rule else amp


def line_envelope(x, fs, f, average: float, decimate: float = 0.1, window: str = "blackman"):
    """Complex envelope of the component near f.

    Demodulates at f and low-passes with a normalized ``window`` (scipy window
    name, or "boxcar") spanning ``average`` seconds, sampled every ``decimate``
    seconds. Returns (t, z) with |z| the line amplitude.
    """
    from scipy.signal import fftconvolve, get_window

    x = np.asarray(x, dtype=float)
    n = np.arange(len(x))
    z = 2 * x * np.exp(-2j * np.pi * f * n / fs)
    L = max(1, int(round(average * fs)))
    if len(z) < L:
        return np.array([]), np.array([], dtype=complex)
    w = get_window(window, L, fftbins=False) if L > 2 else np.ones(L)
    w = w / w.sum()
    zz = fftconvolve(z, w, mode="valid")
    step = max(1, int(round(decimate * fs)))
    starts = np.arange(0, len(zz), step)
    return (starts + L / 2) / fs, zz[starts]


def growth_rate(x, fs, f, t0, t1, average: float) -> float:
    """Least-squares slope (1/s) of log|envelope| of the line near f over [t0, t1]."""
    t, z = line_envelope(x, fs, f, average)
    sel = (t >= t0) & (t <= t1) & (np.abs(z) > 0)
    if sel.sum() < 3:
        raise ValueError("window too short for a growth-rate fit")
    return float(np.polyfit(t[sel], np.log(np.abs(z[sel])), 1)[0])


# ---------------------------------------------------------------- SNR

@dataclass
class SNRTable:
    durations: np.ndarray
    amplitude: np.ndarray
    noise_floor: np.ndarray
    snr: np.ndarray
    exponents: dict
    unbounded: bool = False

    def rows(self):
        return [dict(T_s=float(T), amplitude=float(a), noise_floor=float(n), snr=float(s))
                for T, a, n, s in zip(self.durations, self.amplitude, self.noise_floor, self.snr)]


def snr_scaling(trace, durations, signal_band, noise_band=(8.0, 10.0), start: float = 0.0,
                fs: float | None = None, convention: str = "I") -> SNRTable:
    """Spectral amplitude, noise floor and SNR versus analyzed duration.

    Each duration T analyzes the segment [start, start + T). The amplitude is
    the refined maximum in ``signal_band``; the noise floor is the median
    magnitude over ``noise_band`` divided by sqrt(ln 2), the rms of a circular
    Gaussian whose magnitude has that median. Exponents are log-log slopes.
    """
    x, fs = _series(trace, fs)
    durations = np.asarray(sorted(durations), dtype=float)
    a0 = int(round(start * fs))
    amps, floors = [], []
    for T in durations:
        n = int(round(T * fs))
        if a0 + n > len(x):
            raise ValueError(f"duration {T} s exceeds the trace")
        spec = fft(x[a0:a0 + n], fs, convention)
        sel = np.flatnonzero((spec.f >= signal_band[0]) & (spec.f <= signal_band[1]))
        k = sel[np.argmax(np.abs(spec.values[sel]))]
        df = fs / n
        grid = spec.f[k] - df + 2 * df * np.arange(129) / 128
        amps.append(float(np.abs(spec.refine(grid)).max()))
        nsel = (spec.f >= noise_band[0]) & (spec.f <= noise_band[1])
        floors.append(float(np.median(np.abs(spec.values[nsel])) / np.sqrt(np.log(2))))
    amps = np.array(amps)
    floors = np.array(floors)
    # a floor at round-off level means a noise-free trace
    quiet = floors <= ROUNDOFF_FLOOR * amps
    unbounded = bool(np.any(quiet))
    with np.errstate(divide="ignore"):
        snr = np.where(quiet, np.inf, amps / np.where(quiet, 1, floors))
    logT = np.log(durations)
    ex = {"amplitude": float(np.polyfit(logT, np.log(amps), 1)[0]) if len(durations) > 1 else np.nan}
    if not unbounded and len(durations) > 1:
        ex["noise_floor"] = float(np.polyfit(logT, np.log(floors), 1)[0])
        ex["snr"] = float(np.polyfit(logT, np.log(snr), 1)[0])
    else:
        ex["noise_floor"] = np.nan
        ex["snr"] = np.inf if unbounded else np.nan
    return SNRTable(durations, amps, floors, snr, ex, unbounded)


# ---------------------------------------------------------------- intrinsic gain

@dataclass
class GainSpectrum:
    f: np.ndarray
    G_int: np.ndarray
    chi: np.ndarray | None = None

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("f_Hz,G_int\n")
            np.savetxt(fh, np.column_stack([self.f, self.G_int]), fmt="%.12e", delimiter=",")


def linear_susceptibility(model, f) -> np.ndarray:
    """chi(f) from the master equation linearized about rho_eq.

    Solves (i w - L) X = i mu_0 [D, rho_eq] per frequency, with L the full
    Liouvillian -i[H0, .] + R; chi = hbar N_A C Tr(D X).
    """
    sys = model.system
    n = sys.dim
    eye = np.eye(n)
    L = -1j * (np.kron(model.H0, eye) - np.kron(eye, model.H0.T)) + model.R.matrix
    src = (1j * const.MU_0 * (model.D @ model.rho_eq - model.rho_eq @ model.D)).ravel()
    dvec = model.D.T.ravel()
    f = np.atleast_1d(np.asarray(f, dtype=float))
    out = np.empty(len(f), dtype=complex)
    for i, fi in enumerate(f):
        X = np.linalg.solve(2j * np.pi * fi * np.eye(n * n) - L, src)
        out[i] = dvec @ X
    return out * const.HBAR * const.N_A * model.species.geometry.C


def _driven_point(args):
    from .propagator import run_driven_response
    sys, geo, relax, eqparams, f, kw = args
    return run_driven_response(sys, geo, relax, eqparams, f, **kw)


def intrinsic_gain_spectrum(sys, geo: GeometrySample, relax, eqparams, f_grid, method: str = "time",
                            parallel: int = 1, **kw) -> GainSpectrum:
    """G_int(f) = r^3/(3 d^3) |chi(f)|.

    ``method="time"`` runs one driven simulation per frequency (optionally in
    ``parallel`` worker processes); ``method="linear"`` uses
    :func:`linear_susceptibility`.
    """
    f_grid = np.asarray(f_grid, dtype=float)
    if method == "linear":
        from .model import Species, build_model
        chi = linear_susceptibility(build_model(Species(sys, geo, relax, eqparams)), f_grid)
    elif method == "time":
        tasks = [(sys, geo, relax, eqparams, float(f), kw) for f in f_grid]
        if parallel > 1 and len(tasks) > 1:
            from concurrent.futures import ProcessPoolExecutor
            with ProcessPoolExecutor(max_workers=parallel) as ex:
                chi = np.array(list(ex.map(_driven_point, tasks)))
        else:
            from .model import Species, build_model
            from .propagator import run_driven_response
            model = build_model(Species(sys, geo, relax, eqparams))
            chi = np.array([run_driven_response(sys, geo, relax, eqparams, float(f), model=model, **kw)
                            for f in f_grid])
    else:
        raise ValueError(f"unknown method {method!r}")
    return GainSpectrum(f_grid, geo.geometric_factor * np.abs(chi), chi)


def threshold_gain(G_int_at_f0: float) -> float:
    """Smallest |G_ext| that starts oscillation at full quadrature: 1/G_int."""
    if not G_int_at_f0 > 0:
        raise NoOscillationError("intrinsic gain is zero; no external gain can start oscillation")
    return 1.0 / G_int_at_f0

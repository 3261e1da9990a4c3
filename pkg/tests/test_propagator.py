import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st
from scipy.integrate import solve_ivp

from joscillator import kernel
from joscillator.errors import ConfigurationError, InstabilityError, NumericError
from joscillator.feedback import FeedbackConfig, GeometrySample
from joscillator.model import Species, build_model
from joscillator.propagator import (Drive, RunConfig, SimTrace, Simulation, run_multi_species, run_oscillator,
                                    strang_step)
from joscillator.spins import pulse_unitary

from conftest import a3x_species


def _pauli():
    sx = np.array([[0, 1], [1, 0]]) / 2
    sy = np.array([[0, -1j], [1j, 0]]) / 2
    sz = np.array([[1, 0], [0, -1]]) / 2
    return sx, sy, sz


def ode_reference(model, field, rho0, t_end):
    """Dense DOP853 solution of the two-spin master equation with a prescribed field.

    H0 and the detection operator are rebuilt here from Pauli matrices.
    """
    sys = model.system
    e = np.eye(2)
    S = [np.kron(p, e) for p in _pauli()]
    K = [np.kron(e, p) for p in _pauli()]
    H0 = 2 * np.pi * sys.J * sum(s @ k for s, k in zip(S, K))
    D = sys.gamma_S * S[1] + sys.gamma_K * K[1]
    L, P = model.R.matrix, model.P

    def rhs(t, y):
        r = y.view(complex).reshape(4, 4)
        H = H0 - field(t) * D
        d = -1j * (H @ r - r @ H) + (L @ r.ravel()).reshape(4, 4) + P
        return d.ravel().view(float)

    sol = solve_ivp(rhs, (0, t_end), rho0.ravel().astype(complex).view(float).copy(), method="DOP853",
                    rtol=1e-13, atol=1e-15)
    return sol.y[:, -1].view(complex).reshape(4, 4)


def trace_norm(a):
    return np.abs(np.linalg.eigvalsh(0.5 * (a + a.conj().T))).sum()


def prescribed_field(t):
    # feedback-sized fields (tens of nT) at and away from the line
    return 1e-7 * np.cos(2 * np.pi * 15 * t) + 3e-8 * np.sin(2 * np.pi * 4.1 * t)


def strang_errors(model, t_end, dts):
    U = pulse_unitary(model.system, np.pi / 2)
    rho0 = U @ model.rho_eq @ U.conj().T
    ref = ode_reference(model, prescribed_field, rho0, t_end)
    errs = []
    for dt in dts:
        sim = Simulation([model], RunConfig(t_end, fs=2000.0, dt=dt, field=prescribed_field, initial_state=rho0))
        sim.run()
        errs.append(trace_norm(sim.density_matrices()[0] - ref) / trace_norm(ref))
    return errs


def test_second_order_convergence_against_ode(two_spin_model):
    errs = strang_errors(two_spin_model, 5.0, [5e-4, 2.5e-4])
    assert errs[0] < 1e-6
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.1)


def test_first_order_dissipator_is_first_order(two_spin_model):
    U = pulse_unitary(two_spin_model.system, np.pi / 2)
    rho0 = U @ two_spin_model.rho_eq @ U.conj().T
    ref = ode_reference(two_spin_model, prescribed_field, rho0, 2.0)
    errs = []
    for dt in (5e-4, 2.5e-4):
        sim = Simulation([two_spin_model], RunConfig(2.0, fs=2000.0, dt=dt, field=prescribed_field,
                                                     initial_state=rho0, dissipator_order=1))
        sim.run()
        errs.append(trace_norm(sim.density_matrices()[0] - ref))
    assert errs[0] / errs[1] < 3.0


def test_kernel_matches_dense_reference_step(a3x_model):
    m = a3x_model
    U = pulse_unitary(m.system, 0.3)
    rho = U @ m.rho_eq @ U.conj().T
    dt = 5e-4
    b = 2e-9 * np.sin(np.arange(200) * 0.37)
    dense = rho.copy()
    for bk in b:
        V = -bk * m.D
        dense = strang_step(dense, m.H0, V, V, m.R, m.P, dt)
    for backend in kernel.BACKENDS:
        rk = m.to_kernel(rho)
        kernel.advance(m.ops, rk, b, b, dt, backend=backend)
        assert np.abs(m.from_kernel(rk) - dense).max() < 1e-12


def test_trace_and_hermiticity_over_long_feedback_run(a3x_model):
    fb = FeedbackConfig(tau=0.222, G_ext=20, seed=1)
    sim = Simulation([a3x_model], RunConfig(600.0, feedback=fb, diagnostics_stride=2000))
    tr = sim.run()
    d = tr.diagnostics
    assert np.max(d["trace_dev"]) < 1e-8
    assert np.max(d["herm_dev"]) < 1e-10
    # the run did oscillate, so the check is not vacuous
    assert np.abs(tr.b_opm[-20000:]).max() > 1e-11


def test_quiet_subthreshold_run_stays_at_equilibrium(a3x_model):
    fb = FeedbackConfig(tau=0.222, G_ext=3, noise_rms=0.0)
    sim = Simulation([a3x_model], RunConfig(60.0, feedback=fb))
    tr = sim.run()
    # round-off level: eight orders below the 100 pT line amplitudes
    assert np.abs(tr.b_opm).max() < 1e-18
    assert np.abs(sim.density_matrices()[0] - a3x_model.rho_eq).max() < 1e-12


def test_resumable_advance_matches_single_run(two_spin_model):
    fb = FeedbackConfig(tau=0.115, G_ext=-3000, seed=4)
    whole = Simulation([two_spin_model], RunConfig(6.0, feedback=fb)).run()
    sim = Simulation([two_spin_model], RunConfig(6.0, feedback=fb))
    a, _ = sim.advance(2345)
    b, _ = sim.advance(12000 - 2345)
    assert np.array_equal(np.concatenate([a, b]), whole.b_opm)


def test_same_seed_same_trace(two_spin_model):
    fb = FeedbackConfig(tau=0.115, G_ext=-3000, seed=9)
    a = Simulation([two_spin_model], RunConfig(3.0, feedback=fb)).run().b_opm
    b = Simulation([two_spin_model], RunConfig(3.0, feedback=fb)).run().b_opm
    c = Simulation([two_spin_model], RunConfig(3.0, feedback=FeedbackConfig(0.115, -3000, seed=10))).run().b_opm
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


@pytest.mark.skipif("cython" not in kernel.BACKENDS, reason="compiled kernel not built")
def test_backends_agree_on_feedback_run(a3x_model):
    fb = FeedbackConfig(tau=0.222, G_ext=20, noise_rms=0.0)
    cfg = RunConfig(5.0, feedback=fb, initial_state="pulsed", pulse_angle=0.2)
    a = Simulation([a3x_model], cfg, backend="cython").run().b_opm
    b = Simulation([a3x_model], cfg, backend="python").run().b_opm
    assert np.abs(a - b).max() <= 1e-9 * np.abs(a).max()


def test_split_species_equal_whole():
    whole = a3x_species()
    geo_half = GeometrySample(whole.geometry.r, whole.geometry.d, whole.geometry.C / 2)
    half = Species(whole.system, geo_half, whole.relaxation, whole.equilibrium)
    fb = FeedbackConfig(tau=0.222, G_ext=20, seed=3)
    cfg = RunConfig(20.0, feedback=fb)
    one = run_oscillator(whole.system, whole.geometry, whole.relaxation, whole.equilibrium, cfg)
    two = run_multi_species([half, half], cfg)
    assert np.allclose(one.b_opm, two.b_opm, rtol=0, atol=1e-12 * np.abs(one.b_opm).max())


def test_instability_reports_partial_trace(two_spin_model):
    cfg = RunConfig(5.0, initial_state="pulsed", blowup_ceiling=1e-11)
    with pytest.raises(InstabilityError) as info:
        Simulation([two_spin_model], cfg).run()
    exc = info.value
    assert exc.sample is not None
    assert len(exc.partial) >= exc.sample
    assert np.abs(exc.partial.b_opm).max() > 1e-11


def test_non_finite_field_raises_numeric_error(two_spin_model):
    cfg = RunConfig(1.0, field=lambda t: np.where(t > 0.5, np.nan, 0.0))
    with pytest.raises(NumericError) as info:
        Simulation([two_spin_model], cfg).run()
    assert info.value.step is not None


def test_run_config_validation(two_spin_model):
    with pytest.raises(ConfigurationError):
        RunConfig(-1.0)
    with pytest.raises(ConfigurationError):
        RunConfig(1.0, fs=2000.0, dt=3e-4)
    with pytest.raises(ConfigurationError):
        RunConfig(1.0, feedback=FeedbackConfig(0.1, 1.0), drive=Drive(1.0, 1.0))
    with pytest.raises(ConfigurationError):
        RunConfig(1.0, dissipator_order=3)
    with pytest.raises(ConfigurationError):
        # 15 Hz line needs fs > 30 Hz
        Simulation([two_spin_model], RunConfig(1.0, fs=20.0))


def test_zero_duration_gives_empty_trace(two_spin_model):
    tr = Simulation([two_spin_model], RunConfig(0.0, feedback=FeedbackConfig(0.1, 1.0))).run()
    assert len(tr) == 0


def test_trace_files_round_trip(tmp_path, two_spin_model):
    tr = Simulation([two_spin_model], RunConfig(2.0, initial_state="pulsed")).run()
    tr.write_csv(tmp_path / "t.csv")
    back = SimTrace.read_csv(tmp_path / "t.csv")
    assert back.fs == 2000.0
    assert np.allclose(back.b_opm, tr.b_opm, rtol=1e-8, atol=1e-24)
    tr.write_raw(tmp_path / "t.raw")
    raw = np.fromfile(tmp_path / "t.raw", dtype="<f8").reshape(-1, 3)
    assert np.array_equal(raw[:, 1], tr.b_opm)
    seg = tr.segment(0.5, 1.0)
    assert len(seg) == 1000 and seg.b_opm[0] == tr.b_opm[1000]


@pytest.mark.skipif("cython" not in kernel.BACKENDS, reason="compiled kernel not built")
@settings(max_examples=15, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(1e-12, 1e-7), angle=st.floats(0, np.pi))
def test_compiled_and_python_kernels_agree(a3x_model, seed, scale, angle):
    m = a3x_model
    U = pulse_unitary(m.system, angle)
    rho = U @ m.rho_eq @ U.conj().T
    b = scale * np.random.default_rng(seed).normal(size=100)
    a, c = m.to_kernel(rho), m.to_kernel(rho)
    kernel.advance(m.ops, a, b, b, 5e-4, backend="cython")
    kernel.advance(m.ops, c, b, b, 5e-4, backend="python")
    assert np.abs(m.from_kernel(a) - m.from_kernel(c)).max() < 1e-13

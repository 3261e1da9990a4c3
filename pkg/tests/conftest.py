import numpy as np
import pytest

from joscillator.dissipator import RelaxationParams, ts_for_linewidth
from joscillator.feedback import GeometrySample
from joscillator.model import Species, build_model
from joscillator.spins import alpha_beta_from_integrals, build_a3x_system, build_two_spin_system

R_SAMPLE, D_SENSOR = 4.2e-3, 12.45e-3


def a3x_species(I_1J=66e-12, I_2J=124e-12, Ts=32.0, C=967.0, J=1.687):
    geo = GeometrySample(R_SAMPLE, D_SENSOR, C)
    return Species(build_a3x_system(J), geo, RelaxationParams(Ts), alpha_beta_from_integrals(I_1J, I_2J, geo))


def two_spin_species(J=15.0, fwhm=0.2, I=50e-12, C=100.0, Ts=None):
    sys = build_two_spin_system(J)
    geo = GeometrySample(R_SAMPLE, D_SENSOR, C)
    Ts = ts_for_linewidth(sys, fwhm) if Ts is None else Ts
    return Species(sys, geo, RelaxationParams(Ts), alpha_beta_from_integrals(I, 0.0, geo))


@pytest.fixture(scope="session")
def a3x_model():
    return build_model(a3x_species())


@pytest.fixture(scope="session")
def sweep_model():
    # parameter set of the delay-sweep experiments
    return build_model(a3x_species(58e-12, 106e-12, 28.0))


@pytest.fixture(scope="session")
def two_spin_model():
    return build_model(two_spin_species())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------- acceptance report

_criteria: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion a test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        number, title = mark.args
        entry = _criteria.setdefault(number, {"title": title, "tests": []})
        details = [str(v) for k, v in item.user_properties if k == "detail"]
        entry["tests"].append((item.name, rep.outcome, "; ".join(details)))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        outcomes = [o for _, o, _ in entry["tests"]]
        if all(o == "passed" for o in outcomes):
            verdict = "PASS"
        elif all(o == "skipped" for o in outcomes):
            verdict = "SKIP"
        else:
            verdict = "FAIL"
        tr.write_line(f"criterion {number:2d} {verdict}: {entry['title']}")
        for name, outcome, detail in entry["tests"]:
            if detail or outcome != "passed":
                tr.write_line(f"    {name} [{outcome}] {detail}")

"""Random-field relaxation superoperator and SABRE pumping term.

Density matrices are vectorized row-major (``rho.ravel()``), so that
vec(A X B) = (A kron B^T) vec(X).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .spins import SpinSystem, as_matrix, detection_operator, j_hamiltonian


@dataclass(frozen=True)
class RelaxationParams:
    """Random-field model parameters.

    Ts sets the 1H rate; C_same and C_cross are the field correlation
    coefficients within a spin group and between the 15N and 1H groups.
    """

    Ts: float
    C_same: float = 1.0
    C_cross: float = 2.0 / 3.0

    def __post_init__(self):
        if not self.Ts > 0:
            raise ConfigurationError(f"Ts must be positive, got {self.Ts}")
        if not 0 <= self.C_cross <= self.C_same <= 1:
            raise ConfigurationError("require 0 <= C_cross <= C_same <= 1")


@dataclass(frozen=True, eq=False)
class Superoperator:
    """Dense dim^2 x dim^2 generator acting on row-major vectorized matrices.

    ``Ts`` is kept for step-size validation (inf for a zero generator).
    """

    matrix: np.ndarray
    dim: int
    Ts: float = np.inf

    def __call__(self, rho) -> np.ndarray:
        m = as_matrix(rho)
        return (self.matrix @ m.ravel()).reshape(self.dim, self.dim)


def _double_commutator(A, B):
    """Superoperator of rho -> [A, [B, rho]] for row-major vectorization."""
    n = A.shape[0]
    eye = np.eye(n)
    return (np.kron(A @ B, eye) - np.kron(A, B.T) - np.kron(B, A.T) + np.kron(eye, (B @ A).T))


def random_field_superoperator(sys: SpinSystem, params: RelaxationParams) -> Superoperator:
    """Extreme-narrowing random-field relaxation.

    R(rho) = -(1/Ts) sum_j sum_{I,I'} C_II' g_I g_I' [A_Ij, [A_I'j, rho]]
    with A in {S, K} and g_I = gamma_I / gamma_1H.
    """
    n = sys.dim
    if np.isinf(params.Ts):
        return Superoperator(np.zeros((n * n, n * n), dtype=complex), n, np.inf)
    g = {"S": sys.gamma_S / sys.gamma_K, "K": 1.0}
    ops = {"S": sys.S_ops, "K": sys.K_ops}
    L = np.zeros((n * n, n * n), dtype=complex)
    for j in range(3):
        for a in "SK":
            for b in "SK":
                c = params.C_same if a == b else params.C_cross
                if c == 0:
                    continue
                L -= c * g[a] * g[b] * _double_commutator(ops[a][j], ops[b][j])
    return Superoperator(L / params.Ts, n, params.Ts)


def pump_term(R: Superoperator, rho_eq) -> np.ndarray:
    """P = -R(rho_eq), which makes rho_eq the fixed point of R(rho) + P."""
    P = -R(rho_eq)
    return 0.5 * (P + P.conj().T)


def dissipative_step(rho, R: Superoperator, P: np.ndarray, dt: float, order: int = 1) -> np.ndarray:
    """Advance drho/dt = R(rho) + P over dt.

    ``order=1`` is the explicit Euler step. ``order=2`` adds the second-order
    Taylor term dt^2/2 R(R(rho) + P) of the same affine flow.
    """
    if dt < 0:
        raise ConfigurationError("dt must be non-negative")
    if not dt < R.Ts / 100:
        raise ConfigurationError(f"dt={dt} s violates dt < Ts/100 = {R.Ts / 100} s")
    if order not in (1, 2):
        raise ConfigurationError("order must be 1 or 2")
    m = as_matrix(rho)
    k1 = R(m) + P
    if order == 1:
        return m + dt * k1
    return m + dt * k1 + 0.5 * dt * dt * R(k1)


def coherence_decay_rate(sys: SpinSystem, R: Superoperator, n: int) -> float:
    """Exponential decay rate (1/s) of the zero-field line at n*J.

    Taken from the Liouvillian eigenmode closest to the bare line frequency
    that carries the most detectable weight.
    """
    H0 = j_hamiltonian(sys)
    eye = np.eye(sys.dim)
    Lh = -1j * (np.kron(H0, eye) - np.kron(eye, H0.T))
    w, v = np.linalg.eig(Lh + R.matrix)
    vinv = np.linalg.inv(v)
    D = detection_operator(sys)
    # |weight| of each mode in <D>(t) when the initial coherence is proportional to D
    weight = np.abs(D.T.ravel() @ v) * np.abs(vinv @ D.ravel())
    target = 2 * np.pi * n * sys.J
    near = np.abs(w.imag - target) < 0.25 * 2 * np.pi * sys.J
    if not near.any():
        raise ConfigurationError(f"no Liouvillian mode near {n}J")
    k = np.flatnonzero(near)[np.argmax(weight[near])]
    return float(-w[k].real)


def ts_for_linewidth(sys: SpinSystem, fwhm: float, n: int = 1, C_same: float = 1.0,
                     C_cross: float = 2.0 / 3.0) -> float:
    """Ts giving the free-decay line at n*J a Lorentzian FWHM of ``fwhm`` Hz.

    Rates scale as 1/Ts, so one evaluation at Ts = 1 s suffices.
    """
    if not fwhm > 0:
        raise ConfigurationError("fwhm must be positive")
    rate1 = coherence_decay_rate(sys, random_field_superoperator(sys, RelaxationParams(1.0, C_same, C_cross)), n)
    return rate1 / (np.pi * fwhm)

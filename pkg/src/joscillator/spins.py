"""Spin systems for zero-field J-oscillators.

Operators live in the full product basis: the heteronucleus S (15N) is the
first tensor factor, followed by the protons. ``K_ops`` are the collective
proton operators (sum over protons).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import reduce
from typing import TYPE_CHECKING, Sequence

import numpy as np

from . import constants as const
from .errors import InvalidParamsError, ProjectorError, StateCorruptionError

if TYPE_CHECKING:
    from .feedback import GeometrySample

_SX = np.array([[0, 1], [1, 0]], dtype=complex) / 2
_SY = np.array([[0, -1j], [1j, 0]], dtype=complex) / 2
_SZ = np.array([[1, 0], [0, -1]], dtype=complex) / 2
_PAULI = (_SX, _SY, _SZ)


def _frozen(a):
    a = np.array(a)
    a.setflags(write=False)
    return a


def _embed(op, site, n_sites):
    factors = [np.eye(2, dtype=complex)] * n_sites
    factors[site] = op
    return reduce(np.kron, factors)


@dataclass(frozen=True, eq=False)
class SpinSystem:
    """One heteronucleus S coupled to ``n_protons`` equivalent protons.

    Attributes
    ----------
    dim : int
        Hilbert-space dimension, ``2 ** (n_protons + 1)``.
    S_ops, K_ops : tuple of ndarray
        (x, y, z) operators of the heteronucleus and of the total proton spin.
    gamma_S, gamma_K : float
        Gyromagnetic ratios in rad s^-1 T^-1.
    J : float
        Scalar coupling in Hz.
    """

    dim: int
    S_ops: tuple
    K_ops: tuple
    gamma_S: float
    gamma_K: float
    J: float
    label: str
    n_protons: int
    proton_ops: tuple = field(default=(), repr=False)

    @property
    def line_orders(self):
        """n for every zero-field line at n*J (n = K + 1/2 over proton manifolds K > 0)."""
        return tuple(range(1, (self.n_protons + 1) // 2 + 1))

    @property
    def max_frequency(self):
        """Highest zero-field transition frequency, Hz."""
        return abs(self.J) * (self.n_protons + 1) / 2


def _build_system(n_protons, J, label):
    if not J > 0:
        raise InvalidParamsError(f"J must be positive, got {J}")
    n = n_protons + 1
    S = tuple(_frozen(_embed(p, 0, n)) for p in _PAULI)
    protons = tuple(tuple(_frozen(_embed(p, k, n)) for p in _PAULI) for k in range(1, n))
    K = tuple(_frozen(sum(pr[a] for pr in protons)) for a in range(3))
    return SpinSystem(
        dim=2**n,
        S_ops=S,
        K_ops=K,
        gamma_S=const.GAMMA_15N,
        gamma_K=const.GAMMA_1H,
        J=float(J),
        label=label,
        n_protons=n_protons,
        proton_ops=protons,
    )


def build_a3x_system(J: float) -> SpinSystem:
    """15N coupled to three equivalent protons ([15N]-acetonitrile), dim 16."""
    return _build_system(3, J, "A3X")


def build_two_spin_system(J: float) -> SpinSystem:
    """A single 15N-1H pair, dim 4."""
    return _build_system(1, J, "AX")


def coupling_operator(sys: SpinSystem) -> np.ndarray:
    """S.K"""
    return sum(s @ k for s, k in zip(sys.S_ops, sys.K_ops))


def j_hamiltonian(sys: SpinSystem) -> np.ndarray:
    """H0 = 2 pi J S.K in rad/s."""
    return 2 * np.pi * sys.J * coupling_operator(sys)


def detection_operator(sys: SpinSystem) -> np.ndarray:
    """D = gamma_S Sy + gamma_K Ky; <D> hbar N_A C is the y magnetization."""
    return sys.gamma_S * sys.S_ops[1] + sys.gamma_K * sys.K_ops[1]


@dataclass(frozen=True, eq=False)
class ManifoldProjector:
    """Projector onto all states with total proton spin K and total spin F."""

    K: float
    F: float
    P: np.ndarray
    multiplicity: int


def _cluster(values, rtol):
    """Group sorted eigenvalues; returns a list of index arrays."""
    order = np.argsort(values)
    groups, current = [], [order[0]]
    for a, b in zip(order[:-1], order[1:]):
        if abs(values[b] - values[a]) > rtol * max(1.0, abs(values[a])):
            groups.append(np.array(current))
            current = []
        current.append(b)
    groups.append(np.array(current))
    return groups


def _quantum_number(eig, rtol, what):
    # eig = j (j + 1), j must be a non-negative half integer
    j = (-1 + np.sqrt(1 + 4 * max(eig, 0.0))) / 2
    if abs(2 * j - round(2 * j)) > 1e3 * rtol:
        raise ProjectorError(f"{what} eigenvalue {eig:.6g} is not j(j+1) for half-integer j; "
                             f"clustering tolerance {rtol:g} may be misconfigured")
    return round(2 * j) / 2


def manifold_projectors(sys: SpinSystem, rtol: float = 1e-8) -> list[ManifoldProjector]:
    """Projectors onto the (K, F) manifolds.

    K^2 is diagonalized first; F^2 = (S + K)^2 is then diagonalized inside each
    K eigenspace. Eigenvalues closer than ``rtol`` (relative) are treated as
    degenerate.

    Returns
    -------
    list of ManifoldProjector
        Sorted by decreasing K, then decreasing F.
    """
    K2 = sum(k @ k for k in sys.K_ops)
    F = [s + k for s, k in zip(sys.S_ops, sys.K_ops)]
    F2 = sum(f @ f for f in F)
    wk, vk = np.linalg.eigh(K2)
    out = []
    for idx in _cluster(wk, rtol):
        if np.ptp(wk[idx]) > 1e-6:
            raise ProjectorError(f"K^2 cluster spans {np.ptp(wk[idx]):.3g}; tolerance too loose")
        Kq = _quantum_number(wk[idx].mean(), rtol, "K^2")
        V = vk[:, idx]
        wf, vf = np.linalg.eigh(V.conj().T @ F2 @ V)
        for jdx in _cluster(wf, rtol):
            if np.ptp(wf[jdx]) > 1e-6:
                raise ProjectorError("F^2 cluster spans too wide a range; tolerance too loose")
            Fq = _quantum_number(wf[jdx].mean(), rtol, "F^2")
            W = V @ vf[:, jdx]
            P = W @ W.conj().T
            mult = len(jdx) / (2 * Fq + 1)
            if abs(mult - round(mult)) > 1e-9:
                raise ProjectorError(f"manifold K={Kq}, F={Fq} has rank {len(jdx)}, "
                                     f"not a multiple of 2F+1")
            out.append(ManifoldProjector(Kq, Fq, _frozen(P), int(round(mult))))
    out.sort(key=lambda m: (-m.K, -m.F))
    return out


@dataclass(frozen=True)
class EquilibriumParams:
    """Pumped-state parameters.

    ``I_1J``, ``I_2J`` and ``b0`` are in tesla. ``alpha`` and ``beta`` are the
    per-state population offsets of the K=1/2 and K=3/2 manifolds implied by
    I/(8 b0) and I/(20 b0).
    """

    alpha: float
    beta: float
    I_1J: float
    I_2J: float
    b0: float

    def __post_init__(self):
        if not self.b0 > 0:
            raise InvalidParamsError(f"b0 must be positive, got {self.b0}")
        if abs(self.alpha) >= 1 or abs(self.beta) >= 1:
            raise InvalidParamsError(f"|alpha|, |beta| must be < 1 (got {self.alpha}, {self.beta})")


def b0_normalization(geo: "GeometrySample") -> float:
    """b0 = (mu_1H - mu_15N)/2 * C N_A * (mu_0/3)(r/d)^3, in tesla."""
    b0 = 0.5 * (const.MU_1H - const.MU_15N) * geo.C * const.N_A * const.MU_0 / 3 * (geo.r / geo.d) ** 3
    if not b0 > 0:
        raise InvalidParamsError("b0 <= 0: geometry or concentration invalid")
    return b0


def alpha_beta_from_integrals(I_1J: float, I_2J: float, geo: "GeometrySample") -> EquilibriumParams:
    """Population offsets from the 1J and 2J peak integrals (tesla)."""
    if I_1J < 0 or I_2J < 0:
        raise InvalidParamsError("peak integrals must be non-negative")
    b0 = b0_normalization(geo)
    return EquilibriumParams(alpha=I_1J / (8 * b0), beta=I_2J / (20 * b0), I_1J=float(I_1J),
                             I_2J=float(I_2J), b0=b0)


@dataclass(frozen=True, eq=False)
class DensityOperator:
    matrix: np.ndarray
    time: float = 0.0

    def check(self, tol=1e-10):
        """Raise StateCorruptionError if Hermiticity or unit trace is violated."""
        m = self.matrix
        if not np.all(np.isfinite(m)):
            raise StateCorruptionError("non-finite density matrix")
        if np.max(np.abs(m - m.conj().T)) > tol:
            raise StateCorruptionError("density matrix is not Hermitian")
        if abs(np.trace(m) - 1) > tol:
            raise StateCorruptionError(f"trace deviates from 1 by {abs(np.trace(m) - 1):.3g}")
        return self

    def min_eigenvalue(self):
        return float(np.linalg.eigvalsh(self.matrix).min())


def as_matrix(rho) -> np.ndarray:
    return np.asarray(getattr(rho, "matrix", rho))


def pulse_unitary(sys: SpinSystem, angle: float) -> np.ndarray:
    """Instantaneous DC pulse along y.

    The field-time product is chosen so that the relative rotation of the
    proton and heteronuclear spins equals ``angle``.
    """
    bt = angle / (sys.gamma_K - sys.gamma_S)
    w, v = np.linalg.eigh(detection_operator(sys))
    # V = -B D  =>  U = exp(+i B t D)
    return (v * np.exp(1j * bt * w)) @ v.conj().T


def line_amplitudes(sys: SpinSystem, rho, tol: float = 1e-6) -> dict[int, complex]:
    """Exact coherent <D>(t) line content of a state evolving under H0 alone.

    Returns a mapping n -> complex amplitude c_n such that
    <D>(t) = sum_n Re(c_n exp(i 2 pi n J t)) + const.
    """
    H0 = j_hamiltonian(sys)
    w, v = np.linalg.eigh(H0)
    r = v.conj().T @ as_matrix(rho) @ v
    d = v.conj().T @ detection_operator(sys) @ v
    # <D>(t) = sum_ab r_ab d_ba exp(-i (w_a - w_b) t)
    terms = r * d.T
    gaps = (w[None, :] - w[:, None]) / (2 * np.pi * sys.J)  # w_b - w_a in units of J
    out: dict[int, complex] = {}
    for n in range(1, sys.n_protons + 2):
        mask = np.abs(gaps - n) < tol
        if mask.any():
            out[n] = 2 * complex(terms[mask].sum())
    return out


def _manifold_coupling_terms(sys: SpinSystem, projectors):
    """(S.K) P_K for every K present, keyed by the line index n = K + 1/2."""
    SK = coupling_operator(sys)
    by_K = {}
    for m in projectors:
        by_K.setdefault(m.K, 0)
        by_K[m.K] = by_K[m.K] + m.P
    return {int(round(K + 0.5)): SK @ P for K, P in by_K.items() if K > 0}


def tesla_per_unit_d(params: EquilibriumParams, sys: SpinSystem) -> float:
    """Sensed-field amplitude (T) per unit of <D>, using the b0 normalization."""
    return 4 * params.b0 / (sys.gamma_K - sys.gamma_S)


def equilibrium_state(sys: SpinSystem, params: EquilibriumParams,
                      projectors: Sequence[ManifoldProjector] | None = None) -> DensityOperator:
    """SABRE-pumped isotropic steady state.

    rho_eq = 1/dim + sum_K c_K (S.K) P_K, where P_K projects onto total proton
    spin K. Each c_K is calibrated so that a 90 degree pulse followed by free
    evolution gives a line at (K + 1/2) J whose initial amplitude equals the
    matching peak integral (I_1J for K=1/2, I_2J for K=3/2).
    """
    if projectors is None:
        projectors = manifold_projectors(sys)
    integrals = {1: params.I_1J, 2: params.I_2J}
    scale = tesla_per_unit_d(params, sys)
    U = pulse_unitary(sys, np.pi / 2)
    rho = np.eye(sys.dim, dtype=complex) / sys.dim
    for n, X in _manifold_coupling_terms(sys, projectors).items():
        target = integrals.get(n, 0.0)
        if target == 0:
            continue
        unit = abs(line_amplitudes(sys, U @ X @ U.conj().T).get(n, 0.0)) * scale
        if unit == 0:
            raise InvalidParamsError(f"manifold for line {n}J produces no signal")
        rho = rho + (target / unit) * X
    rho = 0.5 * (rho + rho.conj().T)
    lo = np.linalg.eigvalsh(rho).min()
    if lo < -1e-6:
        raise InvalidParamsError(f"pumped state has negative population {lo:.3g}")
    return DensityOperator(_frozen(rho))


def magnetization(rho, sys: SpinSystem, C: float) -> float:
    """y magnetization in A/m for concentration C in mol/m^3."""
    m = as_matrix(rho)
    if np.max(np.abs(m - m.conj().T)) > 1e-10:
        raise StateCorruptionError("density matrix is not Hermitian")
    D = detection_operator(sys)
    v = np.trace(m @ D)
    assert abs(v.imag) <= 1e-12 * np.abs(D).max() * sys.dim
    return float(v.real) * const.HBAR * const.N_A * C

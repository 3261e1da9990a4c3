"""Precomputed per-species operators, including the propagation basis.

The propagation kernel works in a basis where the detection operator D is
diagonal and H0 is real and block diagonal with blocks of size <= 2. In that
basis H0 - B D stays real symmetric with 2x2 blocks for any field B, so each
coherent half-step has a closed-form exponential. The basis is built from the
eigenvectors of a generic combination of operators that commute with
(K^2, F_y, S_y), which makes D diagonal and keeps H0 in K/F blocks.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .dissipator import RelaxationParams, Superoperator, pump_term, random_field_superoperator
from .errors import ConfigurationError
from .feedback import GeometrySample
from .spins import (EquilibriumParams, ManifoldProjector, SpinSystem, detection_operator,
                    equilibrium_state, j_hamiltonian, manifold_projectors)
from . import constants as const


@dataclass(frozen=True, eq=False)
class KernelOps:
    """Operators of one species in the propagation basis (all read-only)."""

    dim: int
    pair_p: np.ndarray
    pair_q: np.ndarray
    single: np.ndarray
    h0_diag: np.ndarray
    h0_pair: np.ndarray
    d_diag: np.ndarray
    r_indptr: np.ndarray
    r_indices: np.ndarray
    r_data: np.ndarray
    pump: np.ndarray


def _basis_generator(sys: SpinSystem):
    K2 = sum(k @ k for k in sys.K_ops)
    Fy = sys.S_ops[1] + sys.K_ops[1]
    M = 100 * K2 + 10 * Fy + 1.0 * sys.S_ops[1]
    if sys.n_protons >= 2:
        # swap of protons 1 and 2 splits the degenerate K=1/2 copies
        swap = 0.5 * np.eye(sys.dim) + 2 * sum(a @ b for a, b in zip(sys.proton_ops[0], sys.proton_ops[1]))
        M = M + 0.37 * swap
    return M


def propagation_basis(sys: SpinSystem, tol: float = 1e-9):
    """Unitary T with columns spanning the propagation basis.

    Returns
    -------
    T : ndarray
        dim x dim unitary; operators map as A_k = T^H A T.
    pairs : list of (int, int)
        Index pairs coupled by H0.
    singles : list of int
    """
    w, T = np.linalg.eigh(_basis_generator(sys))
    if np.min(np.diff(w)) < 1e-6:
        raise ConfigurationError("propagation basis generator is degenerate")
    H0 = T.conj().T @ j_hamiltonian(sys) @ T
    scale = max(np.abs(H0).max(), 1.0)
    adj = np.abs(H0) > tol * scale
    np.fill_diagonal(adj, False)
    n = sys.dim
    if adj.sum(axis=1).max() > 1:
        raise ConfigurationError("H0 is not 2x2-block diagonal in the propagation basis")
    # rephase so every coupling element is real
    ph = np.ones(n, dtype=complex)
    pairs, singles = [], []
    for i in range(n):
        j = np.flatnonzero(adj[i])
        if len(j) == 0:
            singles.append(i)
        elif j[0] > i:
            pairs.append((i, int(j[0])))
            ph[j[0]] = ph[i] * np.exp(-1j * np.angle(H0[i, j[0]]))
    T = T * ph
    H0 = T.conj().T @ j_hamiltonian(sys) @ T
    D = T.conj().T @ detection_operator(sys) @ T
    if np.abs(H0.imag).max() > tol * scale:
        raise ConfigurationError("could not make H0 real in the propagation basis")
    off = D - np.diag(np.diag(D))
    if np.abs(off).max() > tol * np.abs(D).max():
        raise ConfigurationError("D is not diagonal in the propagation basis")
    return T, pairs, singles


def to_basis(T, A):
    return T.conj().T @ A @ T


def from_basis(T, A):
    return T @ A @ T.conj().T


def superoperator_in_basis(T, R: np.ndarray) -> np.ndarray:
    """R_k = (T^H kron T^T) R (T kron conj T) for row-major vectorization."""
    return np.kron(T.conj().T, T.T) @ R @ np.kron(T, T.conj())


@dataclass(frozen=True)
class Species:
    """Everything that defines one molecular species in a run."""

    system: SpinSystem
    geometry: GeometrySample
    relaxation: RelaxationParams
    equilibrium: EquilibriumParams


@dataclass(eq=False)
class SpeciesModel:
    """Product-basis operators plus their propagation-basis counterparts."""

    species: Species
    H0: np.ndarray
    D: np.ndarray
    R: Superoperator
    P: np.ndarray
    rho_eq: np.ndarray
    projectors: list[ManifoldProjector]
    T: np.ndarray
    ops: KernelOps
    #: sensed field in tesla per unit <D>
    field_per_d: float
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def system(self) -> SpinSystem:
        return self.species.system

    def to_kernel(self, rho) -> np.ndarray:
        return np.ascontiguousarray(to_basis(self.T, np.asarray(rho, dtype=complex)))

    def from_kernel(self, rho_k) -> np.ndarray:
        return from_basis(self.T, rho_k)

    def kernel_projectors(self):
        if "proj" not in self._cache:
            self._cache["proj"] = [to_basis(self.T, m.P) for m in self.projectors]
        return self._cache["proj"]


def build_model(species: Species, sparse_tol: float = 1e-14) -> SpeciesModel:
    sys = species.system
    projectors = manifold_projectors(sys)
    rho_eq = equilibrium_state(sys, species.equilibrium, projectors).matrix
    R = random_field_superoperator(sys, species.relaxation)
    P = pump_term(R, rho_eq)
    T, pairs, singles = propagation_basis(sys)
    H0 = j_hamiltonian(sys)
    D = detection_operator(sys)
    H0k = to_basis(T, H0).real
    Dk = to_basis(T, D).real
    Rk = superoperator_in_basis(T, R.matrix)
    if np.abs(Rk).max() > 0:
        Rk[np.abs(Rk) < sparse_tol * np.abs(Rk).max()] = 0
    csr = sp.csr_matrix(Rk)
    pp = np.array([p for p, _ in pairs], dtype=np.int64)
    qq = np.array([q for _, q in pairs], dtype=np.int64)
    ops = KernelOps(
        dim=sys.dim,
        pair_p=pp,
        pair_q=qq,
        single=np.array(singles, dtype=np.int64),
        h0_diag=np.ascontiguousarray(np.diag(H0k)),
        h0_pair=np.ascontiguousarray(H0k[pp, qq]),
        d_diag=np.ascontiguousarray(np.diag(Dk)),
        r_indptr=csr.indptr.astype(np.int64),
        r_indices=csr.indices.astype(np.int64),
        r_data=csr.data.astype(complex),
        pump=np.ascontiguousarray(to_basis(T, P).ravel()),
    )
    for a in ops.__dict__.values():
        if isinstance(a, np.ndarray):
            a.setflags(write=False)
    field_per_d = -const.MU_0 * species.geometry.geometric_factor * const.HBAR * const.N_A * species.geometry.C
    return SpeciesModel(species, H0, D, R, P, rho_eq, projectors, T, ops, field_per_d)

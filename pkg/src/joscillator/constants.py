"""Physical constants (SI) used throughout the package."""
from scipy import constants as _c

HBAR = _c.hbar
N_A = _c.N_A
MU_0 = _c.mu_0

#: 1H gyromagnetic ratio, rad s^-1 T^-1 (CODATA)
GAMMA_1H = _c.physical_constants["proton gyromag. ratio"][0]
#: 15N gyromagnetic ratio, rad s^-1 T^-1. Not tabulated by CODATA; standard NMR table value.
GAMMA_15N = -2.7116e7

#: nuclear magnetic moments gamma*hbar/2 of spin-1/2 nuclei, J/T
MU_1H = GAMMA_1H * HBAR / 2
MU_15N = GAMMA_15N * HBAR / 2

"""Kernel backend selection.

The compiled extension is used when importable; otherwise the numpy fallback.
Setting ``JOSC_KERNEL=python`` forces the fallback.
"""
import os

import numpy as np

from . import _kernel_py

_compiled = None
if os.environ.get("JOSC_KERNEL", "").lower() != "python":
    try:
        from . import _kernel as _compiled
    except ImportError:  # extension not built
        _compiled = None

BACKENDS = {"python": _kernel_py}
if _compiled is not None:
    BACKENDS["cython"] = _compiled
BACKEND = "cython" if _compiled is not None else "python"


def advance(ops, rho, b1, b3, dt, order=2, out=None, backend=None):
    """Run len(b1) Strang steps on the propagation-basis state ``rho`` in place.

    Parameters
    ----------
    ops : KernelOps
    rho : ndarray
        C-contiguous complex dim x dim matrix, modified in place.
    b1, b3 : ndarray
        Applied field (T) for the first and second coherent half-step of each step.
    out : ndarray, optional
        Receives <D> at the start of every step.

    Returns
    -------
    out, bad : ndarray, int
        ``bad`` is the first step whose expectation was non-finite, else -1.
    """
    mod = BACKENDS[backend or BACKEND]
    b1 = np.ascontiguousarray(b1, dtype=float)
    b3 = np.ascontiguousarray(b3, dtype=float)
    if out is None:
        out = np.empty(len(b1))
    bad = mod.strang_chunk(rho, b1, b3, ops.pair_p, ops.pair_q, ops.single, ops.h0_diag,
                           ops.h0_pair, ops.d_diag, ops.r_indptr, ops.r_indices, ops.r_data,
                           ops.pump, float(dt), int(order), out)
    return out, int(bad)

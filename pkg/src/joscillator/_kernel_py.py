"""Pure numpy implementation of the Strang-splitting kernel.

Same algorithm and signature as the compiled ``_kernel.strang_chunk``; used when
the extension is not built.
"""
import numpy as np
import scipy.sparse as sp


def _half_step(rho, b, h, pp, qq, single, h0d, h0p, dd):
    a = h0d[pp] - b * dd[pp]
    c = h0d[qq] - b * dd[qq]
    m = 0.5 * (a + c)
    dl = 0.5 * (a - c)
    w = np.sqrt(dl * dl + h0p * h0p)
    co = np.cos(w * h)
    sn = np.where(w > 1e-300, np.sin(w * h) / np.where(w > 1e-300, w, 1.0), h)
    ph = np.exp(-1j * m * h)
    u11 = ph * (co - 1j * sn * dl)
    u22 = ph * (co + 1j * sn * dl)
    u12 = ph * (-1j * sn * h0p)
    x = rho[pp, :]
    y = rho[qq, :]
    rho[pp, :] = u11[:, None] * x + u12[:, None] * y
    rho[qq, :] = u12[:, None] * x + u22[:, None] * y
    x = rho[:, pp]
    y = rho[:, qq]
    rho[:, pp] = x * u11.conj() + y * u12.conj()
    rho[:, qq] = x * u12.conj() + y * u22.conj()
    if len(single):
        e = np.exp(-1j * (h0d[single] - b * dd[single]) * h)
        rho[single, :] *= e[:, None]
        rho[:, single] *= e.conj()


def strang_chunk(rho, b1, b3, pair_p, pair_q, single, h0_diag, h0_pair, d_diag,
                 r_indptr, r_indices, r_data, pump, dt, order, out):
    n = rho.shape[0]
    h = 0.5 * dt
    R = sp.csr_matrix((r_data, r_indices, r_indptr), shape=(n * n, n * n)) if len(r_data) else None
    flat = rho.reshape(-1)
    for k in range(len(b1)):
        acc = float(d_diag @ rho.diagonal().real)
        out[k] = acc
        if not np.isfinite(acc):
            return k
        _half_step(rho, b1[k], h, pair_p, pair_q, single, h0_diag, h0_pair, d_diag)
        if R is not None:
            k1 = R @ flat + pump
            if order == 2:
                flat += dt * k1 + 0.5 * dt * dt * (R @ k1)
            else:
                flat += dt * k1
        _half_step(rho, b3[k], h, pair_p, pair_q, single, h0_diag, h0_pair, d_diag)
    return -1

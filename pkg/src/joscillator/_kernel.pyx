# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled Strang-splitting kernel.

Works in the propagation basis (see ``model.py``): the coherent part is a set
of independent 2x2 / 1x1 real symmetric blocks, the dissipator a CSR matrix
acting on the row-major vectorized density matrix.
"""
from libc.math cimport cos, sin, sqrt, isfinite
from libc.stdint cimport int64_t
from libc.stdlib cimport malloc, free

ctypedef double complex cplx


cdef inline cplx _conj(cplx z) nogil:
    return z.real - 1j * z.imag


cdef void _half_step(cplx* rho, Py_ssize_t n, double b, double h,
                     const int64_t[::1] pp, const int64_t[::1] qq, const int64_t[::1] single,
                     const double[::1] h0d, const double[::1] h0p, const double[::1] dd) nogil:
    cdef Py_ssize_t k, j, p, q, s
    cdef double a, c, off, m, dl, w, co, sn, cm, sm
    cdef cplx ph, u11, u22, u12, x, y, e
    for k in range(pp.shape[0]):
        p = pp[k]
        q = qq[k]
        a = h0d[p] - b * dd[p]
        c = h0d[q] - b * dd[q]
        off = h0p[k]
        m = 0.5 * (a + c)
        dl = 0.5 * (a - c)
        w = sqrt(dl * dl + off * off)
        co = cos(w * h)
        if w > 1e-300:
            sn = sin(w * h) / w
        else:
            sn = h
        cm = cos(m * h)
        sm = sin(m * h)
        ph = cm - 1j * sm
        u11 = ph * (co - 1j * sn * dl)
        u22 = ph * (co + 1j * sn * dl)
        u12 = ph * (-1j * sn * off)
        # rows: rho <- U rho
        for j in range(n):
            x = rho[p * n + j]
            y = rho[q * n + j]
            rho[p * n + j] = u11 * x + u12 * y
            rho[q * n + j] = u12 * x + u22 * y
        # columns: rho <- rho U^H
        u11 = _conj(u11)
        u22 = _conj(u22)
        u12 = _conj(u12)
        for j in range(n):
            x = rho[j * n + p]
            y = rho[j * n + q]
            rho[j * n + p] = x * u11 + y * u12
            rho[j * n + q] = x * u12 + y * u22
    for k in range(single.shape[0]):
        s = single[k]
        a = (h0d[s] - b * dd[s]) * h
        e = cos(a) - 1j * sin(a)
        for j in range(n):
            rho[s * n + j] = rho[s * n + j] * e
        e = _conj(e)
        for j in range(n):
            rho[j * n + s] = rho[j * n + s] * e


cdef inline void _csr_matvec(const int64_t[::1] indptr, const int64_t[::1] indices,
                             const cplx[::1] data, const cplx* x, cplx* y, Py_ssize_t nrow) nogil:
    cdef Py_ssize_t r, k
    cdef cplx acc
    for r in range(nrow):
        acc = 0
        for k in range(indptr[r], indptr[r + 1]):
            acc = acc + data[k] * x[indices[k]]
        y[r] = acc


def strang_chunk(cplx[:, ::1] rho, const double[::1] b1, const double[::1] b3,
                 const int64_t[::1] pair_p, const int64_t[::1] pair_q, const int64_t[::1] single,
                 const double[::1] h0_diag, const double[::1] h0_pair, const double[::1] d_diag,
                 const int64_t[::1] r_indptr, const int64_t[::1] r_indices, const cplx[::1] r_data,
                 const cplx[::1] pump, double dt, int order, double[::1] out):
    """Advance ``rho`` in place by len(b1) Strang steps.

    out[k] receives sum_i d_i Re(rho_ii), i.e. <D>, at the start of step k.
    Returns the index of the first step with a non-finite expectation, or -1.
    """
    cdef Py_ssize_t n = rho.shape[0]
    cdef Py_ssize_t nn = n * n
    cdef Py_ssize_t nsteps = b1.shape[0]
    cdef Py_ssize_t k, i
    cdef double h = 0.5 * dt
    cdef double half_dt2 = 0.5 * dt * dt
    cdef double acc
    cdef cplx* r = &rho[0, 0]
    cdef cplx* k1 = <cplx*> malloc(nn * sizeof(cplx))
    cdef cplx* k2 = <cplx*> malloc(nn * sizeof(cplx))
    cdef bint has_r = r_data.shape[0] > 0
    cdef Py_ssize_t bad = -1
    if k1 == NULL or k2 == NULL:
        free(k1)
        free(k2)
        raise MemoryError()
    with nogil:
        for k in range(nsteps):
            acc = 0.0
            for i in range(n):
                acc = acc + d_diag[i] * r[i * n + i].real
            out[k] = acc
            if not isfinite(acc):
                bad = k
                break
            _half_step(r, n, b1[k], h, pair_p, pair_q, single, h0_diag, h0_pair, d_diag)
            if has_r:
                _csr_matvec(r_indptr, r_indices, r_data, r, k1, nn)
                for i in range(nn):
                    k1[i] = k1[i] + pump[i]
                if order == 2:
                    _csr_matvec(r_indptr, r_indices, r_data, k1, k2, nn)
                    for i in range(nn):
                        r[i] = r[i] + dt * k1[i] + half_dt2 * k2[i]
                else:
                    for i in range(nn):
                        r[i] = r[i] + dt * k1[i]
            _half_step(r, n, b3[k], h, pair_p, pair_q, single, h0_diag, h0_pair, d_diag)
    free(k1)
    free(k2)
    return bad

# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled twin of the numpy recurrent-encoder kernel in `_gru_np`.

The sequential time-step loop dominates training cost, so it is fused
here: per step, two BLAS matmuls plus tight elementwise loops over
contiguous time-major blocks. Must stay numerically interchangeable with
the fallback (the parity tests enforce it).
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport fabs, floor, fmin
from libc.string cimport memcpy
from scipy.linalg cimport cython_blas as blas

cnp.import_array()

# rational-polynomial exp (Cephes coefficients, ~1 ulp): branch-free and
# cheap, since scalar libm calls dominate the gate loops otherwise.
DEF EXP_P0 = 1.26177193074810590878e-4
DEF EXP_P1 = 3.02994407707441961300e-2
DEF EXP_P2 = 9.99999999999999999910e-1
DEF EXP_Q0 = 3.00198505138664455042e-6
DEF EXP_Q1 = 2.52448340349684104192e-3
DEF EXP_Q2 = 2.27265548208155028766e-1
DEF EXP_Q3 = 2.00000000000000000005e0
DEF LOG2E = 1.4426950408889634
DEF LN2_HI = 6.93145751953125e-1
DEF LN2_LO = 1.42860682030941723212e-6


cdef inline double _exp_neg(double a) noexcept nogil:
    # exp(-a) for a >= 0, clamped before the 2^n scaling underflows
    cdef double x = -fmin(a, 708.0)
    cdef double n = floor(x * LOG2E + 0.5)
    cdef double r = (x - n * LN2_HI) - n * LN2_LO
    cdef double r2 = r * r
    cdef double p = r * ((EXP_P0 * r2 + EXP_P1) * r2 + EXP_P2)
    cdef double q = ((EXP_Q0 * r2 + EXP_Q1) * r2 + EXP_Q2) * r2 + EXP_Q3
    cdef double res = 1.0 + 2.0 * p / (q - p)
    cdef long long bits = (<long long> n + 1023) << 52
    cdef double scale
    memcpy(&scale, &bits, 8)
    return res * scale


cdef inline double _sigmoid(double x) noexcept nogil:
    cdef double e = _exp_neg(fabs(x))
    cdef double inv = 1.0 / (1.0 + e)
    return inv if x >= 0.0 else e * inv


cdef inline double _tanh(double x) noexcept nogil:
    # tanh(x) = sign(x) * (1 - e^{-2|x|}) / (1 + e^{-2|x|}); exact ±1 past 22
    cdef double a = fmin(fabs(x), 22.0)
    cdef double e = _exp_neg(2.0 * a)
    cdef double t = (1.0 - e) / (1.0 + e)
    return t if x >= 0.0 else -t


cdef inline void _gemm(bint ta, bint tb, int m, int n, int k, double alpha,
                       double* a, int lda, double* b, int ldb,
                       double beta, double* c, int ldc) noexcept nogil:
    # Row-major C(m,n) = alpha*op(A)op(B) + beta*C via the column-major
    # BLAS identity C^T = op(B)^T op(A)^T. lda/ldb/ldc are row strides.
    cdef char cta = 84 if ta else 78  # 'T' / 'N'
    cdef char ctb = 84 if tb else 78
    blas.dgemm(&ctb, &cta, &n, &m, &k, &alpha, b, &ldb, a, &lda, &beta, c, &ldc)


def gru_forward(double[:, :, ::1] xw, double[:, ::1] h0,
                double[:, ::1] wh_zr, double[:, ::1] wh_n):
    cdef int W = xw.shape[0]
    cdef int B = xw.shape[1]
    cdef int d = xw.shape[2] // 3
    cdef cnp.ndarray h_all_arr = np.empty((W + 1, B, d), dtype=np.float64)
    cdef cnp.ndarray zrn_arr = np.empty((W, B, 3 * d), dtype=np.float64)
    cdef double[:, :, ::1] h_all = h_all_arr
    cdef double[:, :, ::1] zrn = zrn_arr
    cdef double[:, ::1] hzr = np.empty((B, 2 * d), dtype=np.float64)
    cdef double[:, ::1] rh = np.empty((B, d), dtype=np.float64)
    cdef double[:, ::1] cn = np.empty((B, d), dtype=np.float64)
    cdef int t, b, j
    cdef double z, r, n, hp
    with nogil:
        for b in range(B):
            for j in range(d):
                h_all[0, b, j] = h0[b, j]
        for t in range(W):
            _gemm(0, 0, B, 2 * d, d, 1.0,
                  &h_all[t, 0, 0], d, &wh_zr[0, 0], 2 * d,
                  0.0, &hzr[0, 0], 2 * d)
            for b in range(B):
                for j in range(d):
                    hp = h_all[t, b, j]
                    z = _sigmoid(xw[t, b, j] + hzr[b, j])
                    r = _sigmoid(xw[t, b, d + j] + hzr[b, d + j])
                    zrn[t, b, j] = z
                    zrn[t, b, d + j] = r
                    rh[b, j] = r * hp
            _gemm(0, 0, B, d, d, 1.0,
                  &rh[0, 0], d, &wh_n[0, 0], d, 0.0, &cn[0, 0], d)
            for b in range(B):
                for j in range(d):
                    hp = h_all[t, b, j]
                    z = zrn[t, b, j]
                    n = _tanh(xw[t, b, 2 * d + j] + cn[b, j])
                    zrn[t, b, 2 * d + j] = n
                    h_all[t + 1, b, j] = z * hp + (1.0 - z) * n
    return h_all_arr, zrn_arr


def gru_backward(double[:, ::1] d_final, double[:, :, ::1] h_all,
                 double[:, :, ::1] zrn, double[:, ::1] wh_zr,
                 double[:, ::1] wh_n):
    cdef int W = h_all.shape[0] - 1
    cdef int B = h_all.shape[1]
    cdef int d = h_all.shape[2]
    cdef cnp.ndarray dxw_arr = np.empty((W, B, 3 * d), dtype=np.float64)
    cdef cnp.ndarray dwh_zr_arr = np.zeros((d, 2 * d), dtype=np.float64)
    cdef cnp.ndarray dwh_n_arr = np.zeros((d, d), dtype=np.float64)
    cdef cnp.ndarray dh0_arr = np.empty((B, d), dtype=np.float64)
    cdef double[:, :, ::1] dxw = dxw_arr
    cdef double[:, ::1] dwh_zr = dwh_zr_arr
    cdef double[:, ::1] dwh_n = dwh_n_arr
    cdef double[:, ::1] dh0 = dh0_arr
    cdef double[:, ::1] dh = np.array(d_final, dtype=np.float64)
    cdef double[:, ::1] dh_next = np.empty((B, d), dtype=np.float64)
    cdef double[:, ::1] da_n = np.empty((B, d), dtype=np.float64)
    cdef double[:, ::1] drh = np.empty((B, d), dtype=np.float64)
    cdef double[:, ::1] rh = np.empty((B, d), dtype=np.float64)
    cdef double[:, ::1] dzr = np.empty((B, 2 * d), dtype=np.float64)
    cdef int t, b, j
    cdef double z, r, n, hp, g, dz, dn, dr
    with nogil:
        for t in range(W - 1, -1, -1):
            for b in range(B):
                for j in range(d):
                    hp = h_all[t, b, j]
                    z = zrn[t, b, j]
                    r = zrn[t, b, d + j]
                    n = zrn[t, b, 2 * d + j]
                    g = dh[b, j]
                    dz = g * (hp - n)
                    dn = g * (1.0 - z)
                    dh_next[b, j] = g * z
                    da_n[b, j] = dn * (1.0 - n * n)
                    rh[b, j] = r * hp
                    dxw[t, b, 2 * d + j] = da_n[b, j]
                    dzr[b, j] = dz * z * (1.0 - z)
            _gemm(0, 1, B, d, d, 1.0,
                  &da_n[0, 0], d, &wh_n[0, 0], d, 0.0, &drh[0, 0], d)
            _gemm(1, 0, d, d, B, 1.0,
                  &rh[0, 0], d, &da_n[0, 0], d, 1.0, &dwh_n[0, 0], d)
            for b in range(B):
                for j in range(d):
                    hp = h_all[t, b, j]
                    r = zrn[t, b, d + j]
                    dh_next[b, j] += drh[b, j] * r
                    dr = drh[b, j] * hp
                    dzr[b, d + j] = dr * r * (1.0 - r)
                    dxw[t, b, j] = dzr[b, j]
                    dxw[t, b, d + j] = dzr[b, d + j]
            _gemm(0, 1, B, d, 2 * d, 1.0,
                  &dzr[0, 0], 2 * d, &wh_zr[0, 0], 2 * d,
                  1.0, &dh_next[0, 0], d)
            _gemm(1, 0, d, 2 * d, B, 1.0,
                  &h_all[t, 0, 0], d, &dzr[0, 0], 2 * d,
                  1.0, &dwh_zr[0, 0], 2 * d)
            for b in range(B):
                for j in range(d):
                    dh[b, j] = dh_next[b, j]
        for b in range(B):
            for j in range(d):
                dh0[b, j] = dh[b, j]
    return dxw_arr, dh0_arr, dwh_zr_arr, dwh_n_arr

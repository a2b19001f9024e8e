# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled implementation of the recurrent graph kernels.

Same contract as ``_fallback``: sequence_forward / sequence_backward on
(T, K, B, C) tensors with a dense (K, K) scaled Laplacian.  Matrix products
go through BLAS dgemm; state updates run in fused C loops.  Gate
nonlinearities go through the same vectorized expit/tanh ufuncs as the
fallback (their SIMD paths beat scalar libm calls), so both backends apply
bit-identical nonlinearities and differ only in dgemm accumulation order.
"""

import numpy as np
from scipy.special import expit

from libc.string cimport memset
from scipy.linalg.cython_blas cimport dgemm

backend_tag = "c"


cdef void _gemm_rm(char ta, char tb, int m, int n, int k,
                   double alpha, double* a, int a_cols,
                   double* b, int b_cols, double beta, double* c) nogil:
    """Row-major C(m,n) = alpha*op(A)@op(B) + beta*C via the transpose trick.

    a_cols/b_cols are the stored (row-major) column counts of A and B.
    """
    dgemm(&tb, &ta, &n, &m, &k, &alpha, b, &b_cols, a, &a_cols, &beta, c, &n)


def _carr(obj):
    """C-contiguous writable float64 view or copy of ``obj``.

    Read-only inputs (frozen panels hand out immutable window arrays) are
    copied so they can back a writable memoryview.
    """
    arr = np.ascontiguousarray(obj, dtype=np.float64)
    if not arr.flags.writeable:
        arr = arr.copy()
    return arr


def sequence_forward(x_seq, lap, W, b, h0, c0):
    """See ranfault.kernels._fallback.sequence_forward."""
    cdef double[:, :, :, ::1] x = _carr(x_seq)
    cdef double[:, ::1] lap_v = _carr(lap)
    cdef double[:, :, ::1] w_v = _carr(W)
    cdef double[::1] b_v = _carr(b)

    cdef Py_ssize_t t_len = x.shape[0], kn = x.shape[1], bsz = x.shape[2], cx = x.shape[3]
    cdef Py_ssize_t n_cheb = w_v.shape[0], cin = w_v.shape[1], g4 = w_v.shape[2]
    cdef Py_ssize_t d = g4 // 4
    if cin != cx + d:
        raise ValueError(f"weight input dim {cin} != feature dim {cx} + state dim {d}")

    basis_np = np.empty((t_len, n_cheb, kn, bsz, cin))
    gates_np = np.empty((t_len, kn, bsz, g4))
    c_seq_np = np.empty((t_len, kn, bsz, d))
    tanh_c_np = np.empty((t_len, kn, bsz, d))
    h_seq_np = np.empty((t_len, kn, bsz, d))
    cdef double[:, :, :, :, ::1] basis = basis_np
    cdef double[:, :, :, ::1] gates = gates_np
    cdef double[:, :, :, ::1] c_seq = c_seq_np
    cdef double[:, :, :, ::1] tanh_c = tanh_c_np
    cdef double[:, :, :, ::1] h_seq = h_seq_np

    cdef double[:, :, ::1] h = np.array(h0, dtype=np.float64, order="C")
    cdef double[:, :, ::1] c = np.array(c0, dtype=np.float64, order="C")
    pre_np = np.empty((kn, bsz, g4))
    cdef double[:, :, ::1] pre = pre_np

    cdef Py_ssize_t t, j, q, r, s
    cdef int nodes = <int> kn, bc = <int> (bsz * cin), kbf = <int> (kn * bsz)
    cdef int cin_i = <int> cin, g4_i = <int> g4
    cdef double cv
    cdef Py_ssize_t dd = d
    for t in range(t_len):
        with nogil:
            # basis[t, 0] = [x_t, h_{t-1}]
            for q in range(kn):
                for r in range(bsz):
                    for s in range(cx):
                        basis[t, 0, q, r, s] = x[t, q, r, s]
                    for s in range(d):
                        basis[t, 0, q, r, cx + s] = h[q, r, s]
            if n_cheb > 1:
                _gemm_rm(b'n', b'n', nodes, bc, nodes, 1.0,
                         &lap_v[0, 0], nodes, &basis[t, 0, 0, 0, 0], bc,
                         0.0, &basis[t, 1, 0, 0, 0])
            for j in range(2, n_cheb):
                # basis[t, j] = 2*lap@basis[t, j-1] - basis[t, j-2]
                for q in range(kn):
                    for r in range(bsz):
                        for s in range(cin):
                            basis[t, j, q, r, s] = basis[t, j - 2, q, r, s]
                _gemm_rm(b'n', b'n', nodes, bc, nodes, 2.0,
                         &lap_v[0, 0], nodes, &basis[t, j - 1, 0, 0, 0], bc,
                         -1.0, &basis[t, j, 0, 0, 0])
            # seed pre with the bias so every gemm can accumulate (beta = 1)
            for q in range(kn):
                for r in range(bsz):
                    for s in range(g4):
                        pre[q, r, s] = b_v[s]
            for j in range(n_cheb):
                _gemm_rm(b'n', b'n', kbf, g4_i, cin_i, 1.0,
                         &basis[t, j, 0, 0, 0], cin_i, &w_v[j, 0, 0], g4_i,
                         1.0, &pre[0, 0, 0])
        gates_t = gates_np[t]
        expit(pre_np[:, :, :2 * dd], out=gates_t[:, :, :2 * dd])     # i, f
        np.tanh(pre_np[:, :, 2 * dd:3 * dd], out=gates_t[:, :, 2 * dd:3 * dd])
        expit(pre_np[:, :, 3 * dd:], out=gates_t[:, :, 3 * dd:])     # o
        with nogil:
            for q in range(kn):
                for r in range(bsz):
                    for s in range(d):
                        cv = (gates[t, q, r, d + s] * c[q, r, s]
                              + gates[t, q, r, s] * gates[t, q, r, 2 * d + s])
                        c[q, r, s] = cv
                        c_seq[t, q, r, s] = cv
        np.tanh(c_seq_np[t], out=tanh_c_np[t])
        with nogil:
            for q in range(kn):
                for r in range(bsz):
                    for s in range(d):
                        h[q, r, s] = gates[t, q, r, 3 * d + s] * tanh_c[t, q, r, s]
                        h_seq[t, q, r, s] = h[q, r, s]
    return h_seq_np, (basis_np, gates_np, c_seq_np, tanh_c_np)


def sequence_backward(dh_seq, lap, W, cache, c0):
    """See ranfault.kernels._fallback.sequence_backward."""
    basis_np, gates_np, c_seq_np, tanh_c_np = cache
    cdef double[:, :, :, ::1] dh = _carr(dh_seq)
    cdef double[:, ::1] lap_v = _carr(lap)
    cdef double[:, :, ::1] w_v = _carr(W)
    cdef double[:, :, :, :, ::1] basis = _carr(basis_np)
    cdef double[:, :, :, ::1] gates = _carr(gates_np)
    cdef double[:, :, :, ::1] c_seq = _carr(c_seq_np)
    cdef double[:, :, :, ::1] tanh_c = _carr(tanh_c_np)
    cdef double[:, :, ::1] c0_v = _carr(c0)

    cdef Py_ssize_t t_len = basis.shape[0], n_cheb = basis.shape[1]
    cdef Py_ssize_t kn = basis.shape[2], bsz = basis.shape[3], cin = basis.shape[4]
    cdef Py_ssize_t g4 = w_v.shape[2], d = g4 // 4, cx = cin - d

    dw_np = np.zeros((n_cheb, cin, g4))
    db_np = np.zeros(g4)
    dx_np = np.empty((t_len, kn, bsz, cx))
    cdef double[:, :, ::1] dw = dw_np
    cdef double[::1] db = db_np
    cdef double[:, :, :, ::1] dx = dx_np

    cdef double[:, :, ::1] dh_rec = np.zeros((kn, bsz, d))
    cdef double[:, :, ::1] dc = np.zeros((kn, bsz, d))
    cdef double[:, :, ::1] dpre = np.empty((kn, bsz, g4))
    cdef double[:, :, :, ::1] coef = np.empty((n_cheb, kn, bsz, cin))
    cdef double[:, :, ::1] buf_a = np.empty((kn, bsz, cin))
    cdef double[:, :, ::1] buf_b = np.empty((kn, bsz, cin))
    cdef double[:, :, ::1] buf_c = np.empty((kn, bsz, cin))
    cdef double[:, :, ::1] prev1, prev2, cur, rot

    cdef Py_ssize_t t, j, q, r, s
    cdef int nodes = <int> kn, bc = <int> (bsz * cin), kbf = <int> (kn * bsz)
    cdef int cin_i = <int> cin, g4_i = <int> g4
    cdef double dhv, dov, dcv, gi, gf, gg, go, tc, cp
    with nogil:
        for t in range(t_len - 1, -1, -1):
            for q in range(kn):
                for r in range(bsz):
                    for s in range(d):
                        gi = gates[t, q, r, s]
                        gf = gates[t, q, r, d + s]
                        gg = gates[t, q, r, 2 * d + s]
                        go = gates[t, q, r, 3 * d + s]
                        tc = tanh_c[t, q, r, s]
                        cp = c_seq[t - 1, q, r, s] if t > 0 else c0_v[q, r, s]
                        dhv = dh[t, q, r, s] + dh_rec[q, r, s]
                        dov = dhv * tc
                        dcv = dc[q, r, s] + dhv * go * (1.0 - tc * tc)
                        dpre[q, r, s] = dcv * gg * gi * (1.0 - gi)
                        dpre[q, r, d + s] = dcv * cp * gf * (1.0 - gf)
                        dpre[q, r, 2 * d + s] = dcv * gi * (1.0 - gg * gg)
                        dpre[q, r, 3 * d + s] = dov * go * (1.0 - go)
                        dc[q, r, s] = dcv * gf
                    for s in range(g4):
                        db[s] += dpre[q, r, s]
            for j in range(n_cheb):
                # dW[j] += basis[t, j]^T @ dpre
                _gemm_rm(b't', b'n', cin_i, g4_i, kbf, 1.0,
                         &basis[t, j, 0, 0, 0], cin_i, &dpre[0, 0, 0], g4_i,
                         1.0, &dw[j, 0, 0])
                # coef[j] = dpre @ W[j]^T
                _gemm_rm(b'n', b't', kbf, cin_i, g4_i, 1.0,
                         &dpre[0, 0, 0], g4_i, &w_v[j, 0, 0], g4_i,
                         0.0, &coef[j, 0, 0, 0])
            # dz = sum_j T_j(lap) @ coef[j], Clenshaw recurrence
            prev1 = buf_a
            prev2 = buf_b
            cur = buf_c
            memset(&prev1[0, 0, 0], 0, kn * bsz * cin * sizeof(double))
            memset(&prev2[0, 0, 0], 0, kn * bsz * cin * sizeof(double))
            for j in range(n_cheb - 1, 0, -1):
                for q in range(kn):
                    for r in range(bsz):
                        for s in range(cin):
                            cur[q, r, s] = coef[j, q, r, s] - prev2[q, r, s]
                _gemm_rm(b'n', b'n', nodes, bc, nodes, 2.0,
                         &lap_v[0, 0], nodes, &prev1[0, 0, 0], bc,
                         1.0, &cur[0, 0, 0])
                rot = prev2
                prev2 = prev1
                prev1 = cur
                cur = rot
            for q in range(kn):
                for r in range(bsz):
                    for s in range(cin):
                        cur[q, r, s] = coef[0, q, r, s] - prev2[q, r, s]
            _gemm_rm(b'n', b'n', nodes, bc, nodes, 1.0,
                     &lap_v[0, 0], nodes, &prev1[0, 0, 0], bc,
                     1.0, &cur[0, 0, 0])
            for q in range(kn):
                for r in range(bsz):
                    for s in range(cx):
                        dx[t, q, r, s] = cur[q, r, s]
                    for s in range(d):
                        dh_rec[q, r, s] = cur[q, r, cx + s]
    return dx_np, dw_np, db_np

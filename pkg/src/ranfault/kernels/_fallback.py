"""Pure-numpy reference implementation of the recurrent graph kernels.

Array layout convention: node-feature tensors are (K, B, C) with K graph
nodes, B batch samples, C channels, so applying the dense K x K graph
operator is a single matmul over the leading axis.  Sequences stack a
leading time axis.

The compiled backend in ``_core`` implements the same two entry points with
identical signatures and cache layouts; results agree to floating-point
noise (~1e-12), not bit level, because the exp/tanh code paths differ.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

backend_tag = "python"


def _lap_apply(lap: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Apply the (K, K) operator to a (K, B, C) tensor along the node axis."""
    k, b, c = z.shape
    return (lap @ z.reshape(k, b * c)).reshape(k, b, c)


def sequence_forward(x_seq, lap, W, b, h0, c0):
    """Unroll the graph-convolutional LSTM over a window.

    x_seq: (T, K, B, Cx); lap: (K, K) scaled Laplacian; W: (Kc, Cin, 4d)
    with Cin = Cx + d and gate order [i|f|g|o]; b: (4d,); h0, c0: (K, B, d).

    Returns (h_seq, cache) where cache = (basis, gates, c_seq, tanh_c):
    basis[t, j] is the j-th Chebyshev basis tensor of [x_t, h_{t-1}],
    gates holds post-activation gate values.  The cache feeds
    sequence_backward and must not be modified in between.
    """
    x_seq = np.ascontiguousarray(x_seq, dtype=np.float64)
    t_len, k, bsz, cx = x_seq.shape
    n_cheb, cin, g4 = W.shape
    d = g4 // 4
    if cin != cx + d:
        raise ValueError(f"weight input dim {cin} != feature dim {cx} + state dim {d}")

    basis = np.empty((t_len, n_cheb, k, bsz, cin))
    gates = np.empty((t_len, k, bsz, g4))
    c_seq = np.empty((t_len, k, bsz, d))
    tanh_c = np.empty((t_len, k, bsz, d))
    h_seq = np.empty((t_len, k, bsz, d))

    h = np.array(h0, dtype=np.float64)
    c = np.array(c0, dtype=np.float64)
    for t in range(t_len):
        z = np.concatenate([x_seq[t], h], axis=2)
        basis[t, 0] = z
        if n_cheb > 1:
            basis[t, 1] = _lap_apply(lap, z)
        for j in range(2, n_cheb):
            basis[t, j] = 2.0 * _lap_apply(lap, basis[t, j - 1]) - basis[t, j - 2]
        pre = np.tensordot(basis[t], W, axes=([0, 3], [0, 1])) + b
        gi = expit(pre[..., :d])
        gf = expit(pre[..., d:2 * d])
        gg = np.tanh(pre[..., 2 * d:3 * d])
        go = expit(pre[..., 3 * d:])
        c = gf * c + gi * gg
        tc = np.tanh(c)
        h = go * tc
        gates[t, ..., :d] = gi
        gates[t, ..., d:2 * d] = gf
        gates[t, ..., 2 * d:3 * d] = gg
        gates[t, ..., 3 * d:] = go
        c_seq[t] = c
        tanh_c[t] = tc
        h_seq[t] = h
    return h_seq, (basis, gates, c_seq, tanh_c)


def _clenshaw(lap: np.ndarray, coeffs: list[np.ndarray]) -> np.ndarray:
    """Sum_j T_j(lap) @ coeffs[j] without forming the matrix polynomials."""
    b1 = np.zeros_like(coeffs[0])
    b2 = np.zeros_like(coeffs[0])
    for j in range(len(coeffs) - 1, 0, -1):
        b1, b2 = coeffs[j] + 2.0 * _lap_apply(lap, b1) - b2, b1
    return coeffs[0] + _lap_apply(lap, b1) - b2


def sequence_backward(dh_seq, lap, W, cache, c0):
    """Reverse-mode gradients of sequence_forward.

    dh_seq: (T, K, B, d) upstream gradient w.r.t. every hidden state (zero
    rows for steps without a direct loss contribution).  Returns
    (dx_seq, dW, db); gradients w.r.t. the zero initial state are dropped.
    """
    basis, gates, c_seq, tanh_c = cache
    t_len, n_cheb, k, bsz, cin = basis.shape
    g4 = W.shape[2]
    d = g4 // 4
    cx = cin - d

    dW = np.zeros_like(W)
    db = np.zeros(g4)
    dx_seq = np.empty((t_len, k, bsz, cx))
    dh_rec = np.zeros((k, bsz, d))
    dc = np.zeros((k, bsz, d))
    dpre = np.empty((k, bsz, g4))
    for t in range(t_len - 1, -1, -1):
        dh = dh_seq[t] + dh_rec
        gi = gates[t, ..., :d]
        gf = gates[t, ..., d:2 * d]
        gg = gates[t, ..., 2 * d:3 * d]
        go = gates[t, ..., 3 * d:]
        tc = tanh_c[t]
        c_prev = c_seq[t - 1] if t > 0 else c0
        do = dh * tc
        dc = dc + dh * go * (1.0 - tc * tc)
        dpre[..., :d] = dc * gg * gi * (1.0 - gi)
        dpre[..., d:2 * d] = dc * c_prev * gf * (1.0 - gf)
        dpre[..., 2 * d:3 * d] = dc * gi * (1.0 - gg * gg)
        dpre[..., 3 * d:] = do * go * (1.0 - go)
        dc = dc * gf
        db += dpre.sum(axis=(0, 1))
        flat = dpre.reshape(k * bsz, g4)
        coeffs = []
        for j in range(n_cheb):
            dW[j] += basis[t, j].reshape(k * bsz, cin).T @ flat
            coeffs.append((flat @ W[j].T).reshape(k, bsz, cin))
        dz = _clenshaw(lap, coeffs)
        dx_seq[t] = dz[..., :cx]
        dh_rec = dz[..., cx:]
    return dx_seq, dW, db

"""Compiled inner loops.

Every float kernel here accumulates each output cell strictly left to right
over the reduction index, so results do not depend on batch size, column
position or how many rows are computed in one call.
"""

import numba as nb
import numpy as np

_JIT = dict(cache=True, nogil=True, boundscheck=False)


@nb.njit(**_JIT)
def matmul_f32_nt(W, H, out):
    # out[j, i] = sum_t W[i, t] * H[j, t]; 8 rows interleaved for ILP only.
    m, k = W.shape
    n = H.shape[0]
    for j in range(n):
        h = H[j]
        o = out[j]
        i = 0
        while i + 8 <= m:
            w0 = W[i]
            w1 = W[i + 1]
            w2 = W[i + 2]
            w3 = W[i + 3]
            w4 = W[i + 4]
            w5 = W[i + 5]
            w6 = W[i + 6]
            w7 = W[i + 7]
            s0 = np.float32(0.0)
            s1 = np.float32(0.0)
            s2 = np.float32(0.0)
            s3 = np.float32(0.0)
            s4 = np.float32(0.0)
            s5 = np.float32(0.0)
            s6 = np.float32(0.0)
            s7 = np.float32(0.0)
            for t in range(k):
                x = h[t]
                s0 += w0[t] * x
                s1 += w1[t] * x
                s2 += w2[t] * x
                s3 += w3[t] * x
                s4 += w4[t] * x
                s5 += w5[t] * x
                s6 += w6[t] * x
                s7 += w7[t] * x
            o[i] = s0
            o[i + 1] = s1
            o[i + 2] = s2
            o[i + 3] = s3
            o[i + 4] = s4
            o[i + 5] = s5
            o[i + 6] = s6
            o[i + 7] = s7
            i += 8
        while i < m:
            w = W[i]
            s = np.float32(0.0)
            for t in range(k):
                s += w[t] * h[t]
            o[i] = s
            i += 1


@nb.njit(**_JIT)
def matmul_i16_nt(Wq, Xq, inv_scale, out):
    # Integer sums are exact, so the reduction is free to vectorize. The
    # explicit int32 casts stop numba widening the products to int64.
    m, kp = Wq.shape
    n = Xq.shape[0]
    for i in range(m):
        w = Wq[i]
        for j in range(n):
            x = Xq[j]
            acc = np.int32(0)
            for t in range(kp):
                acc = np.int32(acc + np.int32(np.int32(w[t]) * np.int32(x[t])))
            out[j, i] = np.float32(acc) * inv_scale


@nb.njit(**_JIT)
def matmul_i16_nt_checked(Wq, Xq, inv_scale, out):
    """Same as ``matmul_i16_nt`` with a shadow 64-bit accumulator.

    Returns the number of output cells whose 32-bit sum wrapped.
    """
    m, kp = Wq.shape
    n = Xq.shape[0]
    bad = 0
    for i in range(m):
        w = Wq[i]
        for j in range(n):
            x = Xq[j]
            acc = np.int32(0)
            wide = np.int64(0)
            for t in range(kp):
                p = np.int32(np.int32(w[t]) * np.int32(x[t]))
                acc = np.int32(acc + p)
                wide += np.int64(p)
            if np.int64(acc) != wide:
                bad += 1
            out[j, i] = np.float32(acc) * inv_scale
    return bad


@nb.njit(**_JIT)
def lut_apply(entries, lo, inv_step, x, out):
    last = entries.shape[0] - 1
    for idx in range(x.shape[0]):
        pos = (x[idx] - lo) * inv_step
        if pos <= 0.0:
            out[idx] = entries[0]
        elif pos >= last:
            out[idx] = entries[last]
        else:
            i = int(pos)
            f = pos - i
            e0 = entries[i]
            out[idx] = e0 + f * (entries[i + 1] - e0)


@nb.njit(inline="always")
def _lut1(entries, lo, inv_step, v):
    last = entries.shape[0] - 1
    pos = (v - lo) * inv_step
    if pos <= 0.0:
        return entries[0]
    if pos >= last:
        return entries[last]
    i = int(pos)
    f = pos - i
    e0 = entries[i]
    return e0 + f * (entries[i + 1] - e0)


@nb.njit(**_JIT)
def vec_add(a, b, out):
    for i in range(a.shape[0]):
        out[i] = a[i] + b[i]


@nb.njit(**_JIT)
def vec_mul(a, b, out):
    for i in range(a.shape[0]):
        out[i] = a[i] * b[i]


@nb.njit(**_JIT)
def gru_combine_lut(wh, wh_rows, vx, uc, has_uc, bias, h_prev, h_rows,
                    sig_e, sig_lo, sig_inv, cand_e, cand_lo, cand_inv, out):
    """Fused GRU gate update with table activations.

    ``wh`` and ``h_prev`` are addressed through ``wh_rows``/``h_rows`` so
    merged recurrent products are scattered without a copy. Additions are
    grouped exactly as in the unfused path.
    """
    n, r = out.shape
    for j in range(n):
        wj = wh[wh_rows[j]]
        hj = h_prev[h_rows[j]]
        vj = vx[j]
        for c in range(r):
            pu = wj[c] + vj[c]
            pr = wj[r + c] + vj[r + c]
            if has_uc:
                pu = pu + uc[j, c]
                pr = pr + uc[j, r + c]
            u = _lut1(sig_e, sig_lo, sig_inv, pu + bias[c])
            g = _lut1(sig_e, sig_lo, sig_inv, pr + bias[r + c])
            ph = g * wj[2 * r + c] + vj[2 * r + c]
            if has_uc:
                ph = ph + uc[j, 2 * r + c]
            hh = _lut1(cand_e, cand_lo, cand_inv, ph + bias[2 * r + c])
            out[j, c] = u * hj[c] + (np.float32(1.0) - u) * hh


@nb.njit(**_JIT)
def attention_scores(Q, K, out):
    # out[j, s] = sum_a Q[j, a] * K[s, a]
    n, a = Q.shape
    S = K.shape[0]
    for j in range(n):
        q = Q[j]
        for s in range(S):
            key = K[s]
            acc = np.float32(0.0)
            for t in range(a):
                acc += q[t] * key[t]
            out[j, s] = acc


@nb.njit(**_JIT)
def weighted_rows(alpha, M, out):
    # out[j, :] = sum_s alpha[j, s] * M[s, :], s ascending
    n, S = alpha.shape
    c = M.shape[1]
    for j in range(n):
        o = out[j]
        for t in range(c):
            o[t] = np.float32(0.0)
        for s in range(S):
            a = alpha[j, s]
            row = M[s]
            for t in range(c):
                o[t] += a * row[t]


@nb.njit(**_JIT)
def quantize_rows(H, clip, scale, out):
    # out[:, :k] = round_half_even(clip(H) * scale), saturated to int16
    n, k = H.shape
    for j in range(n):
        for t in range(k):
            v = np.float64(H[j, t])
            if v > clip:
                v = clip
            elif v < -clip:
                v = -clip
            q = np.rint(v * scale)
            if q > 32767.0:
                q = 32767.0
            elif q < -32768.0:
                q = -32768.0
            out[j, t] = np.int16(q)

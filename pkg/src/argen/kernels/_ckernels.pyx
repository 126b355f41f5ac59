# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled LSTM gate and sparse scoring kernels."""
import numpy as np


def lstm_gates_forward(const double[:, ::1] z, const double[:, ::1] c_prev):
    # transcendental work goes through numpy's vectorized tanh; the loops fuse the rest
    cdef Py_ssize_t B = c_prev.shape[0], H = c_prev.shape[1], b, j
    scale = np.full(4 * H, 0.5)
    scale[2 * H : 3 * H] = 1.0
    acts_arr = np.tanh(np.multiply(z, scale))
    c_arr = np.empty((B, H))
    cdef double[:, ::1] acts = acts_arr, c = c_arr
    cdef double i, f, g
    with nogil:
        for b in range(B):
            for j in range(H):
                i = 0.5 * acts[b, j] + 0.5
                f = 0.5 * acts[b, H + j] + 0.5
                g = acts[b, 2 * H + j]
                acts[b, j] = i
                acts[b, H + j] = f
                acts[b, 3 * H + j] = 0.5 * acts[b, 3 * H + j] + 0.5
                c[b, j] = f * c_prev[b, j] + i * g
    tc_arr = np.tanh(c_arr)
    h_arr = np.empty((B, H))
    cdef double[:, ::1] h = h_arr, tc = tc_arr
    with nogil:
        for b in range(B):
            for j in range(H):
                h[b, j] = acts[b, 3 * H + j] * tc[b, j]
    return h_arr, c_arr, acts_arr, tc_arr


def lstm_gates_backward(const double[:, ::1] dh, const double[:, ::1] dc,
                        const double[:, ::1] acts, const double[:, ::1] tanh_c,
                        const double[:, ::1] c_prev):
    cdef Py_ssize_t B = c_prev.shape[0], H = c_prev.shape[1], b, j
    dz_arr = np.empty((B, 4 * H))
    dcp_arr = np.empty((B, H))
    cdef double[:, ::1] dz = dz_arr, dcp = dcp_arr
    cdef double i, f, g, o, tc, dct
    with nogil:
        for b in range(B):
            for j in range(H):
                i = acts[b, j]
                f = acts[b, H + j]
                g = acts[b, 2 * H + j]
                o = acts[b, 3 * H + j]
                tc = tanh_c[b, j]
                dct = dc[b, j] + dh[b, j] * o * (1.0 - tc * tc)
                dz[b, j] = dct * g * i * (1.0 - i)
                dz[b, H + j] = dct * c_prev[b, j] * f * (1.0 - f)
                dz[b, 2 * H + j] = dct * i * (1.0 - g * g)
                dz[b, 3 * H + j] = dh[b, j] * tc * o * (1.0 - o)
                dcp[b, j] = dct * f
    return dz_arr, dcp_arr


def accumulate_scores(const long[::1] indptr, const long[::1] doc_ids,
                      const double[::1] weights, term_ids, term_weights,
                      Py_ssize_t n_docs):
    scores_arr = np.zeros(n_docs)
    cdef double[::1] scores = scores_arr
    cdef Py_ssize_t t, p
    cdef double w
    for t_obj, w_obj in zip(term_ids, term_weights):
        t = t_obj
        w = w_obj
        for p in range(indptr[t], indptr[t + 1]):
            scores[doc_ids[p]] += w * weights[p]
    return scores_arr

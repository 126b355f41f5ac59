"""Numpy implementations of the hot kernels.

Used when the compiled extension is unavailable or when
``ARGEN_PURE_PYTHON=1`` is set. Results agree with the compiled
versions to float64 rounding.
"""
import numpy as np


def sigmoid(x):
    return 0.5 * np.tanh(0.5 * x) + 0.5


def lstm_gates_forward(z, c_prev):
    """Apply LSTM gate nonlinearities to pre-activations.

    ``z`` holds the stacked (input, forget, candidate, output) blocks,
    shape (B, 4H). Returns ``h, c, acts, tanh_c`` where ``acts`` are the
    post-nonlinearity gates kept for the backward pass.
    """
    hidden = c_prev.shape[1]
    acts = np.empty_like(z)
    acts[:, : 2 * hidden] = sigmoid(z[:, : 2 * hidden])
    acts[:, 2 * hidden : 3 * hidden] = np.tanh(z[:, 2 * hidden : 3 * hidden])
    acts[:, 3 * hidden :] = sigmoid(z[:, 3 * hidden :])
    i = acts[:, :hidden]
    f = acts[:, hidden : 2 * hidden]
    g = acts[:, 2 * hidden : 3 * hidden]
    o = acts[:, 3 * hidden :]
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    return h, c, acts, tanh_c


def lstm_gates_backward(dh, dc, acts, tanh_c, c_prev):
    hidden = c_prev.shape[1]
    i = acts[:, :hidden]
    f = acts[:, hidden : 2 * hidden]
    g = acts[:, 2 * hidden : 3 * hidden]
    o = acts[:, 3 * hidden :]
    dc_total = dc + dh * o * (1.0 - tanh_c * tanh_c)
    dz = np.empty_like(acts)
    dz[:, :hidden] = dc_total * g * i * (1.0 - i)
    dz[:, hidden : 2 * hidden] = dc_total * c_prev * f * (1.0 - f)
    dz[:, 2 * hidden : 3 * hidden] = dc_total * i * (1.0 - g * g)
    dz[:, 3 * hidden :] = dh * tanh_c * o * (1.0 - o)
    return dz, dc_total * f


def accumulate_scores(indptr, doc_ids, weights, term_ids, term_weights, n_docs):
    """Sparse dot product of a query against every document.

    Postings are CSR-style: term ``t`` owns ``doc_ids[indptr[t]:indptr[t+1]]``.
    """
    if len(term_ids) == 0:
        return np.zeros(n_docs)
    docs = []
    vals = []
    for t, w in zip(term_ids, term_weights):
        lo, hi = indptr[t], indptr[t + 1]
        docs.append(doc_ids[lo:hi])
        vals.append(w * weights[lo:hi])
    return np.bincount(np.concatenate(docs), weights=np.concatenate(vals), minlength=n_docs).astype(np.float64)

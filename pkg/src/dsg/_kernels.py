"""Hot inner kernels with numba-jitted and pure-numpy implementations.

The jitted path is the default whenever numba imports cleanly; setting the
environment variable ``DSG_NUMBA=0`` before import selects the pure-numpy
fallback instead.  Both paths are exported under ``_np``/``_nb`` suffixes so
the benchmark and the equivalence tests can call them side by side.
"""

import os

import numpy as np

USE_NUMBA = os.environ.get("DSG_NUMBA", "1") != "0"

if USE_NUMBA:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover - numba is a hard dep, belt & braces
        USE_NUMBA = False


def categorical_rows_np(probs, uniforms):
    """Draw one categorical index per row of ``probs``.

    probs: (M, K) nonnegative rows (need not be exactly normalized);
    uniforms: (M,) iid U[0,1) draws. Returns int64 (M,).
    """
    totals = probs.sum(axis=1)
    cum = np.cumsum(probs, axis=1)
    thresh = uniforms * totals
    idx = (cum <= thresh[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1).astype(np.int64)


def posterior_rows_np(pred, z_t, q_t, qbar_prev, qbar_t):
    """Batched one-step reverse posterior, marginalized over clean states.

    For entity m with observed noisy value b = z_t[m] and clean-state weights
    pred[m], returns the normalized distribution over the previous value a:

        post(a) = sum_c pred(c) * q_t[a, b] * qbar_prev[c, a] / qbar_t[c, b]

    Terms with qbar_t[c, b] == 0 contribute nothing. Rows whose total mass is
    zero are returned as all-zero; the caller decides whether that is an
    unreachable-state error.
    """
    denom = qbar_t[:, z_t].T  # (M, K): qbar_t[c, b_m]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(denom > 0.0, pred / denom, 0.0)
    post = (ratio @ qbar_prev) * q_t[:, z_t].T
    totals = post.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(totals > 0.0, post / totals, 0.0)
    return out


def encode_mixed_radix_np(digits, radices):
    """Pack digit rows (B, D) into int64 codes, first digit most significant."""
    codes = np.zeros(digits.shape[0], dtype=np.int64)
    for d in range(digits.shape[1]):
        codes = codes * radices[d] + digits[:, d]
    return codes


if USE_NUMBA:

    @njit(cache=True)
    def _categorical_rows_nb(probs, uniforms):
        m, k = probs.shape
        out = np.empty(m, dtype=np.int64)
        for i in range(m):
            total = 0.0
            for j in range(k):
                total += probs[i, j]
            r = uniforms[i] * total
            acc = 0.0
            idx = k - 1
            for j in range(k):
                acc += probs[i, j]
                if r < acc:
                    idx = j
                    break
            out[i] = idx
        return out

    @njit(cache=True)
    def _posterior_rows_nb(pred, z_t, q_t, qbar_prev, qbar_t):
        m, k = pred.shape
        out = np.zeros((m, k), dtype=np.float64)
        for i in range(m):
            b = z_t[i]
            total = 0.0
            for a in range(k):
                s = 0.0
                for c in range(k):
                    d = qbar_t[c, b]
                    if d > 0.0 and pred[i, c] > 0.0:
                        s += pred[i, c] * qbar_prev[c, a] / d
                v = s * q_t[a, b]
                out[i, a] = v
                total += v
            if total > 0.0:
                for a in range(k):
                    out[i, a] /= total
        return out

    @njit(cache=True)
    def _encode_mixed_radix_nb(digits, radices):
        b, d = digits.shape
        out = np.zeros(b, dtype=np.int64)
        for i in range(b):
            code = 0
            for j in range(d):
                code = code * radices[j] + digits[i, j]
            out[i] = code
        return out

    categorical_rows = _categorical_rows_nb
    posterior_rows = _posterior_rows_nb
    encode_mixed_radix = _encode_mixed_radix_nb
else:
    categorical_rows = categorical_rows_np
    posterior_rows = posterior_rows_np
    encode_mixed_radix = encode_mixed_radix_np

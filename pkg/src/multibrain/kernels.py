"""Hot numeric kernels with numba and pure-numpy backends.

The two expensive inner loops of the package live here: fused softmax
attention (forward and backward) for the toy transformer, and Lanczos
kernel resampling of feature timelines onto the fMRI acquisition grid.
Everything else in the package is BLAS-shaped matrix algebra that plain
numpy already handles well.

Backend selection happens once at import time:

  * numba is used when importable (the default),
  * set ``MULTIBRAIN_NO_NUMBA=1`` to force the pure-numpy fallback.

Both backends implement identical math; ``benchmarks/bench_kernels.py``
compares them. The numba attention kernels recompute softmax
probabilities in the backward pass instead of caching the T x T
probability matrices, which keeps training memory flat in batch size.
"""

from __future__ import annotations

import math
import os

import numpy as np

_env_flag = os.environ.get("MULTIBRAIN_NO_NUMBA", "")
NUMBA_DISABLED = _env_flag not in ("", "0")

try:  # pragma: no cover - exercised implicitly by backend selection
    from numba import njit, prange

    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and not NUMBA_DISABLED


def active_backend() -> str:
    """Name of the backend the dispatched kernels run on."""
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# Fused softmax attention over stacked (slice, token, head_dim) arrays.
# A "slice" is one (batch item, head) pair; callers flatten heads into the
# leading axis so the kernels stay rank-3.
# ---------------------------------------------------------------------------


def _attention_forward_np(q, k, v):
    S, T, _ = q.shape
    scale = 1.0 / math.sqrt(q.shape[2])
    out = np.empty_like(q)
    for s in range(S):
        scores = (q[s] @ k[s].T) * scale
        scores -= scores.max(axis=1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=1, keepdims=True)
        out[s] = scores @ v[s]
    return out


def _attention_backward_np(q, k, v, d_ctx):
    scale = 1.0 / math.sqrt(q.shape[2])
    dq = np.empty_like(q)
    dk = np.empty_like(k)
    dv = np.empty_like(v)
    for s in range(q.shape[0]):
        scores = (q[s] @ k[s].T) * scale
        scores -= scores.max(axis=1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=1, keepdims=True)
        p = scores
        dv[s] = p.T @ d_ctx[s]
        dp = d_ctx[s] @ v[s].T
        dot = np.sum(dp * p, axis=1, keepdims=True)
        ds = (dp - dot) * p * scale
        dq[s] = ds @ k[s]
        dk[s] = ds.T @ q[s]
    return dq, dk, dv


if HAS_NUMBA:

    @njit(parallel=True, fastmath=True, cache=True)
    def _attention_forward_nb(q, k, v):  # pragma: no cover - compiled
        S, T, dh = q.shape
        out = np.empty_like(q)
        scale = 1.0 / math.sqrt(dh)
        for s in prange(S):
            scores = q[s] @ k[s].T
            for i in range(T):
                row = scores[i]
                m = row[0]
                for j in range(1, T):
                    if row[j] > m:
                        m = row[j]
                tot = 0.0
                for j in range(T):
                    e = np.exp((row[j] - m) * scale)
                    row[j] = e
                    tot += e
                inv = 1.0 / tot
                for j in range(T):
                    row[j] *= inv
            out[s] = scores @ v[s]
        return out

    @njit(parallel=True, fastmath=True, cache=True)
    def _attention_backward_nb(q, k, v, d_ctx):  # pragma: no cover - compiled
        S, T, dh = q.shape
        dq = np.empty_like(q)
        dk = np.empty_like(k)
        dv = np.empty_like(v)
        scale = 1.0 / math.sqrt(dh)
        for s in prange(S):
            scores = q[s] @ k[s].T
            for i in range(T):
                row = scores[i]
                m = row[0]
                for j in range(1, T):
                    if row[j] > m:
                        m = row[j]
                tot = 0.0
                for j in range(T):
                    e = np.exp((row[j] - m) * scale)
                    row[j] = e
                    tot += e
                inv = 1.0 / tot
                for j in range(T):
                    row[j] *= inv
            p = scores
            dv[s] = p.T @ d_ctx[s]
            dp = d_ctx[s] @ v[s].T
            for i in range(T):
                acc = 0.0
                for j in range(T):
                    acc += dp[i, j] * p[i, j]
                for j in range(T):
                    dp[i, j] = (dp[i, j] - acc) * p[i, j] * scale
            dq[s] = dp @ k[s]
            dk[s] = dp.T @ q[s]
        return dq, dk, dv


def attention_forward(q, k, v):
    """Softmax attention context vectors for stacked slices.

    q, k, v: (n_slices, n_tokens, head_dim), contiguous, same dtype.
    Scores are scaled by 1/sqrt(head_dim). Returns the context array
    with the same shape as q.
    """
    if USE_NUMBA:
        return _attention_forward_nb(q, k, v)
    return _attention_forward_np(q, k, v)


def attention_backward(q, k, v, d_ctx):
    """Gradients of :func:`attention_forward` w.r.t. q, k and v.

    Softmax probabilities are recomputed from (q, k) rather than cached,
    so forward passes never have to retain T x T matrices.
    """
    if USE_NUMBA:
        return _attention_backward_nb(q, k, v, d_ctx)
    return _attention_backward_np(q, k, v, d_ctx)


# ---------------------------------------------------------------------------
# Lanczos resampling of a uniformly sampled timeline onto arbitrary target
# times. The kernel is L(u) = sinc(u) * sinc(u / a) for |u| < a (u in units
# of the source spacing) and the weights are renormalized over the available
# support, which makes edge handling and constant preservation exact.
# ---------------------------------------------------------------------------


def _lanczos_window(u: float, a: int) -> float:
    if u == 0.0:
        return 1.0
    if abs(u) >= a:
        return 0.0
    pu = math.pi * u
    return a * math.sin(pu) * math.sin(pu / a) / (pu * pu)


def _lanczos_resample_np(values, t0, dt, targets, a):
    n, d = values.shape
    out = np.empty((targets.shape[0], d), dtype=values.dtype)
    for m, t in enumerate(targets):
        u = (t - t0) / dt
        lo = max(int(math.ceil(u - a)), 0)
        hi = min(int(math.floor(u + a)), n - 1)
        acc = np.zeros(d, dtype=values.dtype)
        wsum = 0.0
        for i in range(lo, hi + 1):
            w = _lanczos_window(u - i, a)
            if w != 0.0:
                acc += w * values[i]
                wsum += w
        out[m] = acc / wsum
    return out


if HAS_NUMBA:

    @njit(cache=True)
    def _lanczos_resample_nb(values, t0, dt, targets, a):  # pragma: no cover
        n, d = values.shape
        out = np.empty((targets.shape[0], d), dtype=values.dtype)
        for m in range(targets.shape[0]):
            u = (targets[m] - t0) / dt
            lo = int(math.ceil(u - a))
            hi = int(math.floor(u + a))
            if lo < 0:
                lo = 0
            if hi > n - 1:
                hi = n - 1
            wsum = 0.0
            for j in range(d):
                out[m, j] = 0.0
            for i in range(lo, hi + 1):
                x = u - i
                if x == 0.0:
                    w = 1.0
                elif abs(x) >= a:
                    w = 0.0
                else:
                    px = math.pi * x
                    w = a * math.sin(px) * math.sin(px / a) / (px * px)
                if w != 0.0:
                    wsum += w
                    for j in range(d):
                        out[m, j] += w * values[i, j]
            for j in range(d):
                out[m, j] /= wsum
        return out


def lanczos_resample_core(values, t0, dt, targets, a=3):
    """Resample (n_samples, dim) values at times t0 + i*dt onto targets.

    Every target must have at least one source sample within ``a`` source
    spacings; weights are renormalized over the support actually present.
    """
    values = np.ascontiguousarray(values)
    targets = np.ascontiguousarray(targets, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] == 0:
        raise ValueError("values must be a non-empty (n_samples, dim) array")
    n = values.shape[0]
    u = (targets - t0) / dt
    if np.any(np.ceil(u - a) > n - 1) or np.any(np.floor(u + a) < 0):
        raise ValueError("target time outside the resampleable span")
    if USE_NUMBA:
        return _lanczos_resample_nb(values, float(t0), float(dt), targets, int(a))
    return _lanczos_resample_np(values, float(t0), float(dt), targets, int(a))

"""Hot inner loops with two interchangeable backends.

The numba path is used when numba imports cleanly and ``AFFUSE_NUMBA`` is not
set to ``0``. The unfold/fold kernels are bit-identical across backends; the
softmax kernels agree to rounding (the exp implementations differ). The numpy
path is the reference the benchmark compares against.
"""
import os

import numpy as np

try:
    import numba
    from numba import njit, prange

    # the system TBB is too old for numba; probing it only emits a warning
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


def _env_flag(name, default):
    raw = os.environ.get(name)
    if raw is None:
        return default
    return raw.strip().lower() not in ("0", "false", "no", "off", "")


USE_NUMBA = HAVE_NUMBA and _env_flag("AFFUSE_NUMBA", True)


def configure_threads():
    """Apply the ``AFFUSE_THREADS`` cap to numba's thread pool, if set."""
    raw = os.environ.get("AFFUSE_THREADS")
    if not raw or not HAVE_NUMBA:
        return
    n = max(1, min(int(raw), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)


# ---------------------------------------------------------------------------
# numpy reference implementations


def unfold_causal_np(x, kernel_size, dilation):
    """(B, C, T) -> (B, C*K, T) with cols[b, c*K+k, t] = x[b, c, t - (K-1-k)*d]."""
    b, c, t = x.shape
    pad = (kernel_size - 1) * dilation
    xp = np.zeros((b, c, t + pad))
    xp[:, :, pad:] = x
    cols = np.empty((b, c, kernel_size, t))
    for k in range(kernel_size):
        cols[:, :, k, :] = xp[:, :, k * dilation:k * dilation + t]
    return cols.reshape(b, c * kernel_size, t)


def fold_causal_np(cols, channels, kernel_size, dilation):
    """Adjoint of :func:`unfold_causal_np`."""
    b, _, t = cols.shape
    pad = (kernel_size - 1) * dilation
    cols = cols.reshape(b, channels, kernel_size, t)
    xp = np.zeros((b, channels, t + pad))
    for k in range(kernel_size):
        xp[:, :, k * dilation:k * dilation + t] += cols[:, :, k, :]
    return xp[:, :, pad:].copy()


def softmax_lastaxis_np(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward_np(s, g):
    return s * (g - (g * s).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# numba implementations (same arithmetic order as the numpy versions)

if HAVE_NUMBA:

    @njit(parallel=True, cache=True)
    def _unfold_causal_nb(x, kernel_size, dilation):
        b, c, t = x.shape
        pad = (kernel_size - 1) * dilation
        cols = np.empty((b, c * kernel_size, t))
        for bc in prange(b * c):
            bi = bc // c
            ci = bc % c
            for k in range(kernel_size):
                shift = min(pad - k * dilation, t)
                row = ci * kernel_size + k
                cols[bi, row, :shift] = 0.0
                cols[bi, row, shift:] = x[bi, ci, :t - shift]
        return cols

    @njit(parallel=True, cache=True)
    def _fold_causal_nb(cols, channels, kernel_size, dilation):
        b = cols.shape[0]
        t = cols.shape[2]
        pad = (kernel_size - 1) * dilation
        out = np.zeros((b, channels, t))
        for bc in prange(b * channels):
            bi = bc // channels
            ci = bc % channels
            # k outermost: each output sums its taps in the order k = 0..K-1,
            # exactly like the numpy scatter loop
            for k in range(kernel_size):
                shift = pad - k * dilation
                row = ci * kernel_size + k
                for s in range(t - shift):
                    out[bi, ci, s] += cols[bi, row, s + shift]
        return out

    @njit(parallel=True, cache=True)
    def _softmax_rows_nb(x2):
        n, m = x2.shape
        out = np.empty((n, m))
        for i in prange(n):
            mx = x2[i, 0]
            for j in range(1, m):
                if x2[i, j] > mx:
                    mx = x2[i, j]
            tot = 0.0
            for j in range(m):
                e = np.exp(x2[i, j] - mx)
                out[i, j] = e
                tot += e
            for j in range(m):
                out[i, j] = out[i, j] / tot
        return out

    @njit(parallel=True, cache=True)
    def _softmax_backward_rows_nb(s2, g2):
        n, m = s2.shape
        out = np.empty((n, m))
        for i in prange(n):
            dot = 0.0
            for j in range(m):
                dot += g2[i, j] * s2[i, j]
            for j in range(m):
                out[i, j] = s2[i, j] * (g2[i, j] - dot)
        return out


# ---------------------------------------------------------------------------
# dispatch


def unfold_causal(x, kernel_size, dilation, use_numba=None):
    if use_numba is None:
        use_numba = USE_NUMBA
    if use_numba:
        return _unfold_causal_nb(np.ascontiguousarray(x), kernel_size, dilation)
    return unfold_causal_np(x, kernel_size, dilation)


def fold_causal(cols, channels, kernel_size, dilation, use_numba=None):
    if use_numba is None:
        use_numba = USE_NUMBA
    if use_numba:
        return _fold_causal_nb(np.ascontiguousarray(cols), channels, kernel_size, dilation)
    return fold_causal_np(cols, channels, kernel_size, dilation)


def softmax_lastaxis(x, use_numba=None):
    if use_numba is None:
        use_numba = USE_NUMBA
    if use_numba:
        shape = x.shape
        return _softmax_rows_nb(np.ascontiguousarray(x).reshape(-1, shape[-1])).reshape(shape)
    return softmax_lastaxis_np(x)


def softmax_backward(s, g, use_numba=None):
    if use_numba is None:
        use_numba = USE_NUMBA
    if use_numba:
        shape = s.shape
        return _softmax_backward_rows_nb(
            np.ascontiguousarray(s).reshape(-1, shape[-1]),
            np.ascontiguousarray(g).reshape(-1, shape[-1]),
        ).reshape(shape)
    return softmax_backward_np(s, g)

"""Pure numpy implementations of the hot kernels.

These mirror ``_ckernels.pyx`` exactly in signature and semantics and are used
whenever the compiled extension is unavailable (or disabled through the
``LEADINST_PURE_PYTHON`` environment variable).
"""

import numpy as np

_RESAMPLE_CHUNK = 1 << 15


def resample_poly(x, table, base, phase):
    """Apply a polyphase FIR bank.

    ``out[n] = sum_j table[phase[n], j] * x[base[n] + j]`` where ``x`` is the
    input already zero-padded on both sides so that every index is valid.
    """
    n_out = base.shape[0]
    taps = table.shape[1]
    out = np.empty(n_out, dtype=np.float64)
    offsets = np.arange(taps)
    for lo in range(0, n_out, _RESAMPLE_CHUNK):
        hi = min(lo + _RESAMPLE_CHUNK, n_out)
        idx = base[lo:hi, None] + offsets[None, :]
        out[lo:hi] = np.einsum("nj,nj->n", table[phase[lo:hi]], x[idx])
    return out


def attention_forward(q, k, v, heads):
    """Per-frame multi-head dot-product attention over a set of tracks.

    q: (T, D) queries; k, v: (N, T, D) keys and values.
    Returns ``(out (T, D), weights (H, T, N))``.
    """
    T, D = q.shape
    N = k.shape[0]
    dh = D // heads
    scale = 1.0 / np.sqrt(dh)
    qh = q.reshape(T, heads, dh)
    kh = k.reshape(N, T, heads, dh)
    vh = v.reshape(N, T, heads, dh)
    scores = np.einsum("thd,nthd->htn", qh, kh) * scale
    scores -= scores.max(axis=2, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=2, keepdims=True)
    out = np.einsum("htn,nthd->thd", w, vh).reshape(T, D)
    return out, w


def attention_backward(q, k, v, w, g_out, heads):
    """Gradients of :func:`attention_forward` wrt ``q``, ``k`` and ``v``."""
    T, D = q.shape
    N = k.shape[0]
    dh = D // heads
    scale = 1.0 / np.sqrt(dh)
    qh = q.reshape(T, heads, dh)
    kh = k.reshape(N, T, heads, dh)
    vh = v.reshape(N, T, heads, dh)
    go = g_out.reshape(T, heads, dh)
    g_v = np.einsum("htn,thd->nthd", w, go)
    g_w = np.einsum("thd,nthd->htn", go, vh)
    g_s = w * (g_w - (w * g_w).sum(axis=2, keepdims=True)) * scale
    g_q = np.einsum("htn,nthd->thd", g_s, kh)
    g_k = np.einsum("htn,thd->nthd", g_s, qh)
    return g_q.reshape(T, D), g_k.reshape(N, T, D), g_v.reshape(N, T, D)


def confusion_matrix(ref, pred, n_classes):
    """Counts ``cm[r, p]`` of (reference, prediction) pairs as int64."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (ref, pred), 1)
    return cm

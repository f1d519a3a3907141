"""Pure numpy implementations of the hot kernels.

Used when the compiled ``_ckernels`` extension is unavailable or when
``ATTNFORGE_PURE_PYTHON=1`` is set. Every function has the exact signature
of its compiled twin.
"""
import numpy as np

from attnforge.errors import DegenerateRowError


def softmax_rows(x, mask=None):
    # x: (R, m) float64; mask: (Rm, m) with R % Rm == 0, tiled over rows.
    if mask is not None:
        reps = x.shape[0] // mask.shape[0]
        x = x + np.tile(mask, (reps, 1))
    mx = x.max(axis=1, keepdims=True)
    if np.any(mx == -np.inf):
        raise DegenerateRowError("softmax row is fully masked (-inf everywhere)")
    e = np.exp(x - mx)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(y, g):
    return y * (g - (y * g).sum(axis=1, keepdims=True))


def logsumexp_rows(x, lam):
    z = lam * x
    mx = z.max(axis=1)
    return (mx + np.log(np.exp(z - mx[:, None]).sum(axis=1))) / lam


def kron(a, b):
    m, n = a.shape
    p, q = b.shape
    return (a[:, None, :, None] * b[None, :, None, :]).reshape(m * p, n * q)


def fwht_rows(x):
    """Unnormalized Walsh-Hadamard transform of every row, in place."""
    rows, n = x.shape
    h = 1
    while h < n:
        v = x.reshape(rows, n // (2 * h), 2, h)
        a = v[:, :, 0, :].copy()
        b = v[:, :, 1, :]
        v[:, :, 0, :] = a + b
        v[:, :, 1, :] = a - b
        h *= 2
    return x

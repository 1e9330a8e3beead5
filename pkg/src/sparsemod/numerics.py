"""Small dense numerics: softmax, GELU, sphere projections, operator norm, TV distance.

Vectors and matrices are plain float64 numpy arrays.
"""
import math

import numpy as np
from scipy.special import ndtr

from .errors import ConvergenceFailure, LengthMismatch

NORM_GUARD = 1e-12
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def softmax(v, axis=-1):
    v = np.asarray(v, dtype=np.float64)
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(v, axis=-1):
    v = np.asarray(v, dtype=np.float64)
    shifted = v - np.max(v, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def gaussian_cdf(x):
    # ndtr keeps relative accuracy deep in the lower tail, unlike 0.5*(1+erf)
    return ndtr(x)


def gaussian_pdf(x):
    x = np.asarray(x, dtype=np.float64)
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def gelu(x):
    """Exact GELU, ``x * Phi(x)``."""
    x = np.asarray(x, dtype=np.float64)
    out = x * gaussian_cdf(x)
    return out if out.ndim else float(out)


def gelu_prime(x):
    """Derivative of :func:`gelu`: ``Phi(x) + x * pdf(x)``."""
    x = np.asarray(x, dtype=np.float64)
    out = gaussian_cdf(x) + x * gaussian_pdf(x)
    return out if out.ndim else float(out)


def normalize(v, guard=NORM_GUARD):
    v = np.asarray(v, dtype=np.float64)
    r = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(r, guard)


def smoothstep(r):
    r = np.asarray(r, dtype=np.float64)
    c = np.clip(r, 0.0, 1.0)
    return c * c * (3.0 - 2.0 * c)


def smoothstep_prime(r):
    r = np.asarray(r, dtype=np.float64)
    return np.where((r > 0.0) & (r < 1.0), 6.0 * r * (1.0 - r), 0.0)


def smoothed_normalize(v, guard=NORM_GUARD):
    """Projection onto the sphere damped near the origin.

    Scales ``v / |v|`` by ``smoothstep(|v|)`` so the map is continuous at 0
    and equals the plain projection for ``|v| >= 1``.
    """
    v = np.asarray(v, dtype=np.float64)
    r = np.linalg.norm(v, axis=-1, keepdims=True)
    return smoothstep(r) * v / np.maximum(r, guard)


def operator_norm(m, tol=1e-10, max_iter=10000):
    """Largest singular value by power iteration on the smaller Gram matrix."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 1:
        m = m[:, None]
    if m.size == 0:
        raise ValueError("operator_norm of an empty matrix")
    gram = m.T @ m if m.shape[1] <= m.shape[0] else m @ m.T
    n = gram.shape[0]
    if not np.any(gram):
        return 0.0
    x = np.full(n, 1.0 / math.sqrt(n))
    y = gram @ x
    if not np.any(y):
        # all-ones start is in the null space; fall back to a fixed generic vector
        x = np.random.default_rng(0).standard_normal(n)
        x /= np.linalg.norm(x)
        y = gram @ x
    lam = float(x @ y)
    for _ in range(max_iter):
        x = y / np.linalg.norm(y)
        y = gram @ x
        new = float(x @ y)
        if abs(new - lam) <= tol * abs(new):
            return math.sqrt(max(new, 0.0))
        lam = new
    raise ConvergenceFailure(
        f"power iteration did not reach rel. tol {tol} in {max_iter} iterations"
    )


def tv_distance(p, q):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise LengthMismatch(f"tv_distance: shapes {p.shape} and {q.shape} differ")
    return 0.5 * float(np.sum(np.abs(p - q)))

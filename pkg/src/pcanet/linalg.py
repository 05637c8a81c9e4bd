"""Dense symmetric eigendecomposition and pseudo-inverse.

Filter learning and WPCA only ever need the full spectrum of small dense
symmetric matrices (order ``k1*k2*channels``, a few hundred at most), so the
default solver is a plain cyclic Jacobi iteration in float64.  Its output is
made reproducible by sorting eigenvalues in descending order and fixing the
sign of every eigenvector.
"""

from typing import NamedTuple

import numpy as np

from .errors import InvalidInputError

# Above this order the Jacobi sweeps get slow in pure numpy; LAPACK takes over.
JACOBI_MAX_ORDER = 256

_MAX_SWEEPS = 60


class EigenPairs(NamedTuple):
    values: np.ndarray  # (n,), non-increasing
    vectors: np.ndarray  # (n, n), column j pairs with values[j]


def as_symmetric(a):
    """Return ``(a + a.T) / 2`` as a float64 array, validating shape and finiteness."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise InvalidInputError(f"expected a non-empty square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("matrix contains non-finite entries")
    return 0.5 * (a + a.T)


def _jacobi(a):
    a = a.copy()
    n = a.shape[0]
    v = np.eye(n)
    if n == 1:
        return np.diag(a).copy(), v
    scale = np.linalg.norm(a)
    if scale == 0.0:
        return np.zeros(n), v
    eps = np.finfo(np.float64).eps
    for _ in range(_MAX_SWEEPS):
        off = np.linalg.norm(a - np.diag(np.diag(a)))
        if off <= eps * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                app = a[p, p]
                aqq = a[q, q]
                if abs(apq) <= eps * 1e-3 * np.sqrt(abs(app * aqq)):
                    a[p, q] = a[q, p] = 0.0
                    continue
                diff = aqq - app
                if abs(apq) < 1e-150 * abs(diff):  # tau would overflow; t ~ 1/(2 tau)
                    t = apq / diff
                else:
                    tau = diff / (2.0 * apq)
                    t = (1.0 if tau >= 0.0 else -1.0) / (abs(tau) + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                cp = a[:, p].copy()
                cq = a[:, q]
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
                rp = a[p, :].copy()
                rq = a[q, :]
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q]
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    return np.diag(a).copy(), v


def canonicalize_signs(vectors):
    """Flip each column so its largest-magnitude entry is positive.

    When several entries share the largest magnitude the lowest index wins.
    The operation is idempotent.
    """
    vectors = np.array(vectors, dtype=np.float64, copy=True)
    if vectors.ndim == 1:
        return canonicalize_signs(vectors[:, None])[:, 0]
    mags = np.abs(vectors)
    peak = mags.max(axis=0)
    # first index within rounding of the column maximum
    lead = np.argmax(mags >= peak * (1.0 - 1e-12), axis=0)
    signs = np.where(vectors[lead, np.arange(vectors.shape[1])] < 0.0, -1.0, 1.0)
    return vectors * signs


def _order(values, vectors):
    idx = np.argsort(-values, kind="stable")
    values = values[idx]
    vectors = vectors[:, idx]
    # Within a numerically degenerate cluster, order vectors lexicographically
    # (descending) so the result does not depend on rotation order.
    tol = 1e-12 * max(np.abs(values).max(), np.finfo(np.float64).tiny)
    start = 0
    n = len(values)
    while start < n:
        stop = start + 1
        while stop < n and values[stop - 1] - values[stop] <= tol:
            stop += 1
        if stop - start > 1:
            block = vectors[:, start:stop]
            keys = np.round(block, 12)
            perm = sorted(range(stop - start), key=lambda j: tuple(-keys[:, j]))
            vectors[:, start:stop] = block[:, perm]
        start = stop
    return values, vectors


def sym_eig(a, method="auto"):
    """Full eigendecomposition of a real symmetric matrix.

    Parameters
    ----------
    a : array_like, shape (n, n)
        Symmetrized on entry via ``(a + a.T) / 2``.
    method : {"auto", "jacobi", "lapack"}
        ``"auto"`` uses Jacobi up to order ``JACOBI_MAX_ORDER`` and LAPACK
        (``numpy.linalg.eigh``) beyond.

    Returns
    -------
    EigenPairs
        Eigenvalues in descending order with sign-canonicalized, orthonormal
        eigenvectors as columns.
    """
    a = as_symmetric(a)
    if method == "auto":
        method = "jacobi" if a.shape[0] <= JACOBI_MAX_ORDER else "lapack"
    if method == "jacobi":
        values, vectors = _jacobi(a)
    elif method == "lapack":
        values, vectors = np.linalg.eigh(a)
    else:
        raise InvalidInputError(f"unknown eigensolver {method!r}")
    values, vectors = _order(values, canonicalize_signs(vectors))
    return EigenPairs(values, vectors)


def pinv(a, rel_tol=1e-10):
    """Moore-Penrose pseudo-inverse of a symmetric matrix via ``sym_eig``.

    Eigenvalues with ``|lambda| <= rel_tol * max|lambda|`` are treated as zero.
    """
    if not rel_tol > 0:
        raise InvalidInputError("rel_tol must be positive")
    values, vectors = sym_eig(a)
    peak = np.abs(values).max()
    keep = np.abs(values) > rel_tol * peak if peak > 0 else np.zeros(len(values), bool)
    inv = np.zeros_like(values)
    inv[keep] = 1.0 / values[keep]
    out = (vectors * inv) @ vectors.T
    return 0.5 * (out + out.T)

"""Dense linear-algebra kernels used by the quantizers.

Every routine works on float64 ``numpy`` arrays. Inputs to the Cholesky
routines are symmetrized as ``(h + h.T) / 2`` before factorization and no
pivoting is performed; callers are expected to dampen degenerate matrices
first (see :func:`attnquant.hessian.dampen`).
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla

__all__ = [
    "LinalgError",
    "NotPositiveDefinite",
    "DimensionOverflow",
    "as_matrix",
    "symmetrize",
    "cholesky_lower",
    "inverse_cholesky_upper",
    "kron",
    "KRON_MAX_ELEMENTS",
]

KRON_MAX_ELEMENTS = 2**24


class LinalgError(ValueError):
    pass


class NotPositiveDefinite(LinalgError):
    """A non-positive pivot was met; the matrix needs damping."""


class DimensionOverflow(LinalgError):
    """A materialized matrix would exceed the configured element cap."""


def as_matrix(a, name="matrix"):
    """Return ``a`` as a finite 2-D float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def symmetrize(h):
    h = as_matrix(h)
    if h.shape[0] != h.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {h.shape}")
    return 0.5 * (h + h.T)


def cholesky_lower(h):
    """Lower Cholesky factor ``L`` with ``L @ L.T == h``.

    Raises :class:`NotPositiveDefinite` when ``h`` is not positive definite.
    """
    h = symmetrize(h)
    try:
        low = np.linalg.cholesky(h)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    if not np.all(np.diag(low) > 0):
        raise NotPositiveDefinite("non-positive pivot")
    return low


def inverse_cholesky_upper(h):
    """Upper-triangular ``U`` with ``U.T @ U == inv(h)``, i.e. ``Chol(inv(h)).T``.

    The inverse is never formed. With ``J`` the reversal permutation,
    ``J h J = M M.T`` gives ``inv(h) = (J inv(M) J).T (J inv(M) J)`` and
    ``J inv(M) J`` is upper triangular with a positive diagonal, so by
    uniqueness it is the requested factor.
    """
    h = symmetrize(h)
    n = h.shape[0]
    m = cholesky_lower(h[::-1, ::-1])
    m_inv = sla.solve_triangular(m, np.eye(n), lower=True, check_finite=False)
    u = np.ascontiguousarray(m_inv[::-1, ::-1])
    return np.triu(u)


def kron(a, b, max_elements=KRON_MAX_ELEMENTS):
    """Kronecker product with a guard against accidental materialization."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    size = a.shape[0] * b.shape[0] * a.shape[1] * b.shape[1]
    if size > max_elements:
        raise DimensionOverflow(
            f"kron output of {size} elements exceeds cap {max_elements}"
        )
    return np.kron(a, b)

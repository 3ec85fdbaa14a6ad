"""Dense matrix helpers: vec/Kronecker operators and the factorizations used
to split a mean Jacobian into two factors.

Everything here accepts plain ``numpy`` arrays. The LU routine works on a
single matrix or on a stack of shape ``(..., n, n)`` so that particle
ensembles can be factored in one call.
"""

from __future__ import annotations

import numpy as np

from .errors import NotPositiveDefinite, ShapeMismatch, SingularMatrix

PIVOT_FLOOR = 1e-12
COND_CAP = 1e12


def vec(A) -> np.ndarray:
    """Stack the columns of ``A`` top to bottom."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    return A.reshape(-1, order="F")


def kron(A, B) -> np.ndarray:
    """Kronecker product, block ``(i, j)`` equal to ``A[i, j] * B``."""
    return np.kron(np.atleast_2d(np.asarray(A, dtype=float)), np.atleast_2d(np.asarray(B, dtype=float)))


def frobenius_norm(A) -> float:
    return float(np.sqrt(np.sum(np.square(np.asarray(A, dtype=float)))))


def _check_square(A: np.ndarray) -> None:
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise ShapeMismatch(f"expected square matrix, got shape {A.shape}")


def _doolittle(A: np.ndarray):
    """Unpivoted Doolittle LU over the trailing two axes.

    Returns ``(L, U, ok)`` where ``ok`` flags, per matrix, that every pivot
    cleared ``PIVOT_FLOOR * ||A||_F``.
    """
    n = A.shape[-1]
    U = A.copy()
    L = np.broadcast_to(np.eye(n), A.shape).copy()
    floor = PIVOT_FLOOR * np.sqrt(np.sum(A * A, axis=(-2, -1)))
    ok = np.ones(A.shape[:-2], dtype=bool)
    for k in range(n - 1):
        piv = U[..., k, k]
        good = np.abs(piv) >= floor
        ok &= good
        safe = np.where(good, piv, 1.0)
        factors = U[..., k + 1 :, k] / safe[..., None]
        L[..., k + 1 :, k] = factors
        U[..., k + 1 :, :] -= factors[..., :, None] * U[..., k, None, :]
        U[..., k + 1 :, k] = 0.0
    ok &= np.abs(U[..., n - 1, n - 1]) >= floor
    return L, U, ok


def lu_decompose(A):
    """Doolittle factorization ``A = L U`` without pivoting.

    ``L`` is unit lower-triangular and ``U`` upper-triangular. Works on a
    single matrix or a stack of matrices.

    Raises
    ------
    SingularMatrix
        If any pivot magnitude drops below ``1e-12 * ||A||_F``.
    """
    A = np.asarray(A, dtype=float)
    _check_square(A)
    L, U, ok = _doolittle(A)
    if not np.all(ok):
        raise SingularMatrix("LU pivot below floor; matrix singular or needs pivoting")
    return L, U


def split_factors(J):
    """Factor a mean Jacobian as ``J = J1 @ J2`` for the Wishart model.

    Doolittle LU is used whenever every pivot is healthy; otherwise the
    matrix falls back to ``J = Q R``. Accepts a stack.

    Returns
    -------
    J1, J2 : ndarray
        Factors with the same shape as ``J``.
    method : str or ndarray of str
        ``"lu"`` or ``"qr"`` for each matrix.
    """
    J = np.asarray(J, dtype=float)
    _check_square(J)
    cond = np.linalg.cond(J)
    if np.any(~np.isfinite(cond) | (cond > COND_CAP)):
        raise SingularMatrix(f"mean Jacobian condition number {np.max(cond):.3g} exceeds {COND_CAP:.0e}")
    L, U, ok = _doolittle(J)
    if np.all(ok):
        method = np.full(J.shape[:-2], "lu") if J.ndim > 2 else "lu"
        return L, U, method
    Q, R = np.linalg.qr(J)
    J1 = np.where(ok[..., None, None], L, Q)
    J2 = np.where(ok[..., None, None], U, R)
    method = np.where(ok, "lu", "qr")
    if J.ndim == 2:
        method = str(method)
    return J1, J2, method


def cholesky(S) -> np.ndarray:
    """Upper-triangular factor ``U`` with ``U.T @ U == S``.

    Raises
    ------
    NotPositiveDefinite
        If ``S`` is not symmetric positive definite.
    """
    S = np.asarray(S, dtype=float)
    _check_square(S)
    scale = max(np.max(np.abs(S)), 1.0)
    if np.max(np.abs(S - np.swapaxes(S, -1, -2))) > 1e-12 * scale:
        raise NotPositiveDefinite("matrix is not symmetric")
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    return np.swapaxes(L, -1, -2)


def is_spd(S) -> bool:
    try:
        cholesky(S)
    except NotPositiveDefinite:
        return False
    return True


def sym(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + np.swapaxes(A, -1, -2))

"""Matrix-variate normal and Wishart distributions.

Conventions follow the usual Kronecker form: ``X ~ N_{p,q}(M, Sigma (x) Psi)``
means ``vec(X.T)`` is multivariate normal with covariance ``kron(Sigma, Psi)``,
so ``Sigma`` (p x p) couples rows and ``Psi`` (q x q) couples columns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DofTooSmall, ShapeMismatch
from .linalg import cholesky
from .specfun import RngStream, log_multivariate_gamma

_LOG_2PI = math.log(2.0 * math.pi)


def _logdet_spd(S: np.ndarray) -> float:
    U = cholesky(S)
    return 2.0 * float(np.sum(np.log(np.diag(U))))


@dataclass(frozen=True)
class MatrixNormalParams:
    mean: np.ndarray
    row_cov: np.ndarray
    col_cov: np.ndarray

    def __post_init__(self):
        M = np.atleast_2d(np.asarray(self.mean, dtype=float))
        S = np.atleast_2d(np.asarray(self.row_cov, dtype=float))
        P = np.atleast_2d(np.asarray(self.col_cov, dtype=float))
        p, q = M.shape
        if S.shape != (p, p) or P.shape != (q, q):
            raise ShapeMismatch(f"mean {M.shape} incompatible with row_cov {S.shape} / col_cov {P.shape}")
        object.__setattr__(self, "mean", M)
        object.__setattr__(self, "row_cov", S)
        object.__setattr__(self, "col_cov", P)

    @property
    def shape(self):
        return self.mean.shape


@dataclass(frozen=True)
class WishartParams:
    dof: float
    scale: np.ndarray

    def __post_init__(self):
        S = np.atleast_2d(np.asarray(self.scale, dtype=float))
        if S.shape[0] != S.shape[1]:
            raise ShapeMismatch("Wishart scale must be square")
        if not self.dof >= S.shape[0]:
            raise DofTooSmall(f"degrees of freedom {self.dof} < dimension {S.shape[0]}")
        object.__setattr__(self, "scale", S)
        object.__setattr__(self, "dof", float(self.dof))

    @property
    def dim(self) -> int:
        return self.scale.shape[0]


def matnorm_logpdf(X, params: MatrixNormalParams) -> float:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape != params.shape:
        raise ShapeMismatch(f"X has shape {X.shape}, expected {params.shape}")
    p, q = params.shape
    D = X - params.mean
    quad = np.trace(np.linalg.solve(params.row_cov, D) @ np.linalg.solve(params.col_cov, D.T))
    return float(
        -0.5 * p * q * _LOG_2PI
        - 0.5 * q * _logdet_spd(params.row_cov)
        - 0.5 * p * _logdet_spd(params.col_cov)
        - 0.5 * quad
    )


def matnorm_sample(rng: RngStream, params: MatrixNormalParams, size=None) -> np.ndarray:
    """Draw ``X = M + A Z B^T`` with ``A A^T = Sigma`` and ``B B^T = Psi``.

    ``size`` prepends batch dimensions; ``None`` returns a single matrix.
    """
    A = cholesky(params.row_cov).T
    B = cholesky(params.col_cov).T
    batch = () if size is None else (size if isinstance(size, tuple) else (size,))
    Z = rng.standard_normal(batch + params.shape)
    return params.mean + A @ Z @ B.T


def wishart_logpdf(S, params: WishartParams) -> float:
    S = np.atleast_2d(np.asarray(S, dtype=float))
    p, d = params.dim, params.dof
    if S.shape != (p, p):
        raise ShapeMismatch(f"S has shape {S.shape}, expected {(p, p)}")
    logdet_s = _logdet_spd(S)  # raises NotPositiveDefinite
    logdet_sigma = _logdet_spd(params.scale)
    tr = float(np.trace(np.linalg.solve(params.scale, S)))
    return (
        -0.5 * d * p * math.log(2.0)
        - log_multivariate_gamma(p, 0.5 * d)
        - 0.5 * d * logdet_sigma
        + 0.5 * (d - p - 1) * logdet_s
        - 0.5 * tr
    )


def bartlett_factor(rng: RngStream, dof: float, p: int, batch=()) -> np.ndarray:
    """Lower-triangular Bartlett factor ``A`` with ``A A^T ~ W_p(dof, I)``."""
    A = np.zeros(batch + (p, p))
    shapes = 0.5 * (dof - np.arange(p))  # (d - j + 1)/2 for j = 1..p
    A[..., np.arange(p), np.arange(p)] = np.sqrt(rng.gamma(shapes, 2.0, size=batch + (p,)))
    rows, cols = np.tril_indices(p, -1)
    if rows.size:
        A[..., rows, cols] = rng.standard_normal(batch + (rows.size,))
    return A


def wishart_sample(rng: RngStream, params: WishartParams, size=None) -> np.ndarray:
    """Bartlett construction ``S = L A A^T L^T`` with ``L L^T = Sigma``.

    Non-integer degrees of freedom are supported.
    """
    batch = () if size is None else (size if isinstance(size, tuple) else (size,))
    L = cholesky(params.scale).T
    LA = L @ bartlett_factor(rng, params.dof, params.dim, batch)
    S = LA @ np.swapaxes(LA, -1, -2)
    return 0.5 * (S + np.swapaxes(S, -1, -2))


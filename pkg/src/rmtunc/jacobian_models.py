"""Stochastic inverse-differential-kinematics models.

Three ways of turning the deterministic step ``q+ = q + J(q)^-1 xdot dt`` into
a random one:

* :class:`AdditiveGaussianModel` adds state noise ``w ~ N(0, Sigma_w)``.
* :class:`MaxEntWishartModel` samples ``J = J1 B J2`` where ``J1 J2`` is a
  factorization of the mean Jacobian and ``B`` is Wishart with identity mean.
* :class:`GaussianNoiseMatrixModel` adds an isotropic Gaussian noise matrix to
  the Jacobian (or to its inverse), with variance set by a norm bound.

Every sampler accepts a stack of mean Jacobians of shape ``(N, n, n)`` and
then draws one matrix per entry, which is how particle ensembles use them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import DispersionTooLarge, NormBoundViolated, ShapeMismatch, SingularDraw, SingularMatrix, Unsupported
from .linalg import COND_CAP, split_factors
from .randmat import bartlett_factor
from .specfun import RngStream

MAX_REDRAWS = 100

JACOBIAN = "jacobian"
INVERSE_JACOBIAN = "inverse-jacobian"


@dataclass(frozen=True)
class AdditiveGaussianModel:
    noise_cov: np.ndarray

    def __post_init__(self):
        S = np.atleast_2d(np.asarray(self.noise_cov, dtype=float))
        if S.shape[0] != S.shape[1] or not np.allclose(S, S.T, atol=1e-15, rtol=1e-12):
            raise ShapeMismatch("noise_cov must be a symmetric square matrix")
        w, V = np.linalg.eigh(S)
        if w.min() < -1e-12 * max(1.0, abs(w).max()):
            raise ShapeMismatch("noise_cov must be positive semidefinite")
        object.__setattr__(self, "noise_cov", S)
        # symmetric square root tolerates the all-zero (noise off) case
        object.__setattr__(self, "_sqrt", (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T)

    @property
    def n(self) -> int:
        return self.noise_cov.shape[0]

    name = "additive"


@dataclass(frozen=True)
class MaxEntWishartModel:
    """Wishart perturbation with dispersion ``sigma_B``; ``0`` disables noise."""

    dispersion: float
    n: int = 3

    def __post_init__(self):
        if self.dispersion < 0:
            raise DispersionTooLarge("dispersion must be >= 0")
        if self.dispersion > 0:
            maxent_theta(self.dispersion, np.eye(self.n))

    @property
    def theta(self) -> float:
        return maxent_theta(self.dispersion, np.eye(self.n))

    @property
    def dof(self) -> float:
        return self.theta + self.n + 1

    name = "wishart"


@dataclass(frozen=True)
class GaussianNoiseMatrixModel:
    """Gaussian noise matrix bounded by ``||J||_F <= norm_bound`` in expectation.

    ``target`` picks whether the Jacobian itself or its inverse is perturbed.
    ``uncertainty_scale = 0`` disables noise.
    """

    norm_bound: float
    uncertainty_scale: float
    target: str = INVERSE_JACOBIAN

    def __post_init__(self):
        if not self.norm_bound > 0:
            raise ValueError("norm_bound must be > 0")
        if not 0 <= self.uncertainty_scale <= 1:
            raise ValueError("uncertainty_scale must lie in [0, 1]")
        if self.target not in (JACOBIAN, INVERSE_JACOBIAN):
            raise ValueError(f"unknown target {self.target!r}")

    name = "gaussian"


RandomJacobianModel = Union[AdditiveGaussianModel, MaxEntWishartModel, GaussianNoiseMatrixModel]


@dataclass
class PropagationContext:
    q: np.ndarray
    desired_ee_velocity: np.ndarray
    dt: float

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        self.q = np.asarray(self.q, dtype=float)
        self.desired_ee_velocity = np.asarray(self.desired_ee_velocity, dtype=float)


# --------------------------------------------------------------------------
# MaxEnt / Wishart


def maxent_theta(sigma_B: float, mean_B=None) -> float:
    """Wishart shape offset ``theta`` for a requested dispersion.

    ``theta = (1 + tr(B)^2 / tr(B^2)) / sigma_B^2 - (n + 1)``; the perturbation
    matrix is then ``W_n(theta + n + 1, mean_B / (theta + n + 1))``.
    """
    mean_B = np.eye(3) if mean_B is None else np.atleast_2d(np.asarray(mean_B, dtype=float))
    if not sigma_B > 0:
        raise DispersionTooLarge("sigma_B must be > 0")
    n = mean_B.shape[0]
    tr = np.trace(mean_B)
    theta = (1.0 + tr * tr / np.trace(mean_B @ mean_B)) / sigma_B**2 - (n + 1)
    if not theta > 0:
        raise DispersionTooLarge(f"sigma_B={sigma_B} gives theta={theta:.6g} <= 0")
    return float(theta)


def sample_perturbation(rng: RngStream, model: MaxEntWishartModel, batch=()) -> np.ndarray:
    """Draw ``B ~ W_n(d, I/d)`` with ``d = theta + n + 1`` (identity mean)."""
    n = model.n
    if model.dispersion == 0:
        return np.broadcast_to(np.eye(n), batch + (n, n)).copy()
    d = model.dof
    A = bartlett_factor(rng, d, n, batch)
    B = A @ np.swapaxes(A, -1, -2) / d
    return 0.5 * (B + np.swapaxes(B, -1, -2))


def _batch_of(mean: np.ndarray, size):
    if size is None:
        return mean.shape[:-2]
    extra = size if isinstance(size, tuple) else (size,)
    return extra + mean.shape[:-2]


def _check_square_jac(mean_J: np.ndarray) -> None:
    if mean_J.ndim < 2 or mean_J.shape[-1] != mean_J.shape[-2]:
        raise Unsupported("only square (non-redundant) Jacobians are supported")


def maxent_sample_jacobian(rng: RngStream, model: MaxEntWishartModel, mean_J, size=None) -> np.ndarray:
    """Random Jacobian ``J1 B J2`` with ``mean_J = J1 J2`` (LU, QR fallback)."""
    mean_J = np.asarray(mean_J, dtype=float)
    _check_square_jac(mean_J)
    J1, J2, _ = split_factors(mean_J)
    B = sample_perturbation(rng, model, _batch_of(mean_J, size))
    return J1 @ B @ J2


def _maxent_inverse(rng: RngStream, model: MaxEntWishartModel, mean_J: np.ndarray) -> np.ndarray:
    J1, J2, _ = split_factors(mean_J)
    B = sample_perturbation(rng, model, mean_J.shape[:-2])
    return np.linalg.inv(J1 @ B @ J2)


# --------------------------------------------------------------------------
# Gaussian noise matrix


def gaussian_noise_variance(model: GaussianNoiseMatrixModel, mean_M) -> np.ndarray:
    """Per-entry variance ``beta / n^2`` of the optimal isotropic noise.

    ``beta = alpha^2 (u^2 - ||mean_M||_F^2)`` is the slack in the trace
    constraint. Works on stacks; returns an array of shape ``mean_M.shape[:-2]``.
    """
    mean_M = np.asarray(mean_M, dtype=float)
    n = mean_M.shape[-1]
    norm2 = np.sum(mean_M * mean_M, axis=(-2, -1))
    slack = model.norm_bound**2 - norm2
    if np.any(slack <= 0):
        raise NormBoundViolated(
            f"||mean||_F = {np.sqrt(np.max(norm2)):.6g} >= norm bound u = {model.norm_bound:.6g}"
        )
    return model.uncertainty_scale**2 * slack / n**2


def gaussian_noise_covariance(model: GaussianNoiseMatrixModel, mean_M) -> np.ndarray:
    """Maximizer of ``ln|Sigma|`` subject to ``tr(n Sigma) <= alpha^2 (u^2 - ||mean_M||_F^2)``.

    The log-determinant is Schur-concave and the constraint only sees the
    trace, so the optimum spreads the budget evenly: ``Sigma = beta/n^2 I``.
    """
    mean_M = np.asarray(mean_M, dtype=float)
    n = mean_M.shape[-1]
    var = np.asarray(gaussian_noise_variance(model, mean_M))
    return var[..., None, None] * np.eye(n)


def _gaussian_target_sample(rng: RngStream, model: GaussianNoiseMatrixModel, mean_M: np.ndarray, batch) -> np.ndarray:
    """Perturbed copies of ``mean_M``; resamples numerically singular draws."""
    std = np.sqrt(gaussian_noise_variance(model, mean_M))
    shape = batch + mean_M.shape[-2:]
    std = np.broadcast_to(np.asarray(std)[..., None, None], shape)
    out = mean_M + std * rng.standard_normal(shape)
    if model.uncertainty_scale == 0:
        return out
    for _ in range(MAX_REDRAWS):
        bad = ~(np.linalg.cond(out) < COND_CAP)
        if not np.any(bad):
            return out
        redraw = np.broadcast_to(mean_M, shape)[bad] + std[bad] * rng.standard_normal(out[bad].shape)
        out[bad] = redraw
    raise SingularDraw(f"perturbed matrix singular after {MAX_REDRAWS} redraws")


def gaussian_sample_jacobian(rng: RngStream, model: GaussianNoiseMatrixModel, mean_J, size=None) -> np.ndarray:
    """Draw ``J = mean_J + J_nu`` with ``J_nu ~ N_{n,n}(0, I (x) Sigma_k)``.

    For the inverse target the noise is added to ``mean_J^-1`` and the
    perturbed inverse is inverted back.
    """
    mean_J = np.asarray(mean_J, dtype=float)
    _check_square_jac(mean_J)
    batch = _batch_of(mean_J, size)
    if model.target == JACOBIAN:
        return _gaussian_target_sample(rng, model, mean_J, batch)
    inv = _gaussian_target_sample(rng, model, _safe_inv(mean_J), batch)
    return np.linalg.inv(inv)


def _safe_inv(J: np.ndarray) -> np.ndarray:
    if np.any(~(np.linalg.cond(J) < COND_CAP)):
        raise SingularMatrix("mean Jacobian is numerically singular")
    return np.linalg.inv(J)


# --------------------------------------------------------------------------
# propagation


def sample_inverse_jacobian(rng: RngStream, model: RandomJacobianModel, mean_J) -> np.ndarray:
    """One random ``J^-1`` per mean Jacobian in the stack (identity noise for the additive model)."""
    mean_J = np.asarray(mean_J, dtype=float)
    _check_square_jac(mean_J)
    if isinstance(model, MaxEntWishartModel):
        return _maxent_inverse(rng, model, mean_J)
    if isinstance(model, GaussianNoiseMatrixModel):
        if model.target == INVERSE_JACOBIAN:
            return _gaussian_target_sample(rng, model, _safe_inv(mean_J), mean_J.shape[:-2])
        return _safe_inv(_gaussian_target_sample(rng, model, mean_J, mean_J.shape[:-2]))
    return _safe_inv(mean_J)


def step_with_jacobian(rng: RngStream, model: RandomJacobianModel, q, mean_J, xdot, dt: float) -> np.ndarray:
    """Advance states ``q`` (``(N, n)``) given their mean Jacobians (``(N, n, n)``)."""
    q = np.atleast_2d(np.asarray(q, dtype=float))
    mean_J = np.asarray(mean_J, dtype=float).reshape(q.shape[:1] + q.shape[-1:] * 2)
    step = np.asarray(xdot, dtype=float) * dt
    q_next = q + sample_inverse_jacobian(rng, model, mean_J) @ step
    if isinstance(model, AdditiveGaussianModel):
        q_next = q_next + rng.standard_normal(q.shape) @ model._sqrt
    return q_next


def propagate_batch(rng: RngStream, model: RandomJacobianModel, q, xdot, dt: float, jacobian_fn) -> np.ndarray:
    """Advance every row of ``q`` by one random step; ``jacobian_fn`` must accept a stack."""
    q = np.atleast_2d(np.asarray(q, dtype=float))
    return step_with_jacobian(rng, model, q, jacobian_fn(q), xdot, dt)


def propagate(rng: RngStream, model: RandomJacobianModel, ctx: PropagationContext, jacobian_fn) -> np.ndarray:
    """One random step ``q_{k+1}`` from ``ctx.q`` under ``model``.

    ``jacobian_fn`` maps a single state to its ``n x n`` Jacobian.
    """
    mean_J = np.asarray(jacobian_fn(ctx.q), dtype=float)
    return step_with_jacobian(rng, model, ctx.q[None, :], mean_J[None], ctx.desired_ee_velocity, ctx.dt)[0]


def deterministic_step(q, xdot, dt, jacobian_fn) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    J = jacobian_fn(q)
    return q + np.linalg.solve(J, np.asarray(xdot, dtype=float) * dt)

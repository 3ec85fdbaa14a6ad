"""Fast invariant checks run by ``rmtunc selftest``.

Each check returns ``(passed, detail)``; details are numbers so the report is
reproducible byte for byte.
"""

from __future__ import annotations

import numpy as np

from . import linalg, randmat, wrench
from .filter import ParticleSet, systematic_resample
from .jacobian_models import (
    GaussianNoiseMatrixModel,
    MaxEntWishartModel,
    gaussian_noise_variance,
    maxent_theta,
    sample_perturbation,
)
from .manipulator import ChainSpec, forward_kinematics, jacobian
from .specfun import RngStream, bessel_ie, bessel_ratio


def _kron_vec_identity(rng):
    A, X, B = (rng.standard_normal((3, 3)) for _ in range(3))
    err = np.max(np.abs(linalg.vec(A @ X @ B) - linalg.kron(B.T, A) @ linalg.vec(X)))
    return err < 1e-12, err


def _lu_roundtrip(rng):
    J = rng.standard_normal((3, 3)) + 3 * np.eye(3)
    J1, J2, _ = linalg.split_factors(J)
    err = np.max(np.abs(J1 @ J2 - J))
    return err < 1e-12, err


def _maxent_worked_value(rng):
    theta = maxent_theta(0.25)
    return abs(theta - 60.0) < 1e-12, theta


def _gaussian_worked_value(rng):
    model = GaussianNoiseMatrixModel(18.0, 0.1)
    M = np.diag([2.0, 0.0, 0.0])
    var = float(np.ravel(gaussian_noise_variance(model, M))[0])
    return abs(var - 3.2 / 9.0) < 1e-12, var


def _wishart_mean(rng):
    B = sample_perturbation(rng, MaxEntWishartModel(0.25), (20000,))
    err = np.linalg.norm(B.mean(axis=0) - np.eye(3)) / np.sqrt(3)
    return err < 0.02, err


def _matnorm_second_moment(rng):
    M = rng.standard_normal((2, 3))
    S = np.array([[1.0, 0.3], [0.3, 0.5]])
    P = np.array([[1.0, 0.2, 0.0], [0.2, 0.8, 0.1], [0.0, 0.1, 0.6]])
    A = rng.standard_normal((3, 3))
    X = randmat.matnorm_sample(rng, randmat.MatrixNormalParams(M, S, P), 100000)
    mc = np.mean(X @ A @ np.swapaxes(X, -1, -2), axis=0)
    exact = np.trace(A.T @ P) * S + M @ A @ M.T
    err = np.linalg.norm(mc - exact) / np.linalg.norm(exact)
    return err < 0.05, err


def _bessel_continuity(rng):
    lo = bessel_ie(0, np.nextafter(15.0, 0.0))
    hi = bessel_ie(0, 15.0)
    err = abs(lo - hi) / hi
    return err < 1e-13, err


def _force_variance_identity(rng):
    m = 5
    spec = wrench.CableSystemSpec(
        rng.uniform(3, 5, m), rng.uniform(0.5, 1, m), rng.uniform(0.7, 3.1, m), rng.uniform(100, 800, m)
    )
    vx, vy = wrench.parametric_force_variance(spec)
    r1, _ = bessel_ratio(spec.concentrations)
    a = spec.mean_tensions**2 + spec.tension_stds**2 - (r1 * spec.mean_tensions) ** 2
    err = abs(vx + vy - a.sum())
    return err < 1e-12, err


def _wrench_closed_form(rng):
    spec = wrench.CableSystemSpec([4.0, 3.5, 4.5], [0.7, 0.6, 0.9], [0.9, 1.8, 2.6], [300.0, 500.0, 200.0])
    model = wrench.RmtWrenchModel.from_spec(spec, np.diag([5e-4, 7e-4]))
    exact = wrench.wrench_cov_closed_form(model)
    mc = wrench.product_mc_cov(RngStream(rng.integers(2**32), (0,)), model, 200000)
    err = np.linalg.norm(mc - exact) / np.linalg.norm(exact)
    return err < 0.03, err


def _jacobian_fd(rng):
    chain = ChainSpec()
    q = rng.uniform(-1, 1, 3)
    h = 1e-6
    fd = np.stack([(forward_kinematics(q + h * e, chain) - forward_kinematics(q - h * e, chain)) / (2 * h) for e in np.eye(3)], axis=1)
    err = np.max(np.abs(fd - jacobian(q, chain)))
    return err < 1e-6, err


def _resample_weights(rng):
    w = rng.random(1000)
    w /= w.sum()
    idx = systematic_resample(RngStream(1), w)
    ps = ParticleSet(np.zeros((1000, 3)), np.full(1000, 1e-3))
    counts = np.bincount(idx, minlength=1000)
    # systematic resampling keeps every count within one of N w_i
    err = float(np.max(np.abs(counts - 1000 * w)))
    return err < 1.0 and abs(ps.weights.sum() - 1.0) < 1e-12, err


CHECKS = {
    "kron_vec_identity": _kron_vec_identity,
    "lu_roundtrip": _lu_roundtrip,
    "maxent_theta_worked_value": _maxent_worked_value,
    "gaussian_variance_worked_value": _gaussian_worked_value,
    "wishart_identity_mean": _wishart_mean,
    "matnorm_second_moment": _matnorm_second_moment,
    "bessel_branch_continuity": _bessel_continuity,
    "force_variance_identity": _force_variance_identity,
    "wrench_closed_form_vs_mc": _wrench_closed_form,
    "jacobian_finite_difference": _jacobian_fd,
    "systematic_resample_counts": _resample_weights,
}


def run_checks(seed: int = 0, map_fn=map) -> dict:
    """Run every check with its own derived generator; returns ``{name: (passed, detail)}``."""
    names = list(CHECKS)

    def one(i):
        gen = RngStream(seed, (9000, i)).gen
        ok, detail = CHECKS[names[i]](gen)
        return bool(ok), float(detail)

    return dict(zip(names, map_fn(one, range(len(names)))))

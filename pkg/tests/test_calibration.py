import numpy as np
import pytest
from scipy.optimize import minimize

from rmtunc import calibration as cal
from rmtunc.errors import InsufficientRuns, InsufficientSamples, ShapeMismatch
from rmtunc.jacobian_models import MaxEntWishartModel, sample_perturbation
from rmtunc.linalg import split_factors
from rmtunc.manipulator import GroundTruthLaw, jacobian, simulate_ensemble
from rmtunc.specfun import RngStream


@pytest.fixture(scope="module")
def small_ensemble(task, chain):
    return simulate_ensemble(RngStream(21), chain, task, GroundTruthLaw(), 30)


def test_weights_must_pair_to_one():
    with pytest.raises(ValueError):
        cal.CalibrationWeights(0.6, 0.6)
    with pytest.raises(ValueError):
        cal.CalibrationWeights(1.2, -0.2)


def test_process_noise_is_zero_for_noise_free_runs(task, chain):
    q = simulate_ensemble(RngStream(0), chain, task, GroundTruthLaw(0.0), 2)
    noise = cal.extract_process_noise(q, task, chain)
    assert noise.omegas.shape == (2, task.M, 3)
    assert np.abs(noise.omegas).max() < 1e-15


def test_process_noise_shape_check(task, chain):
    with pytest.raises(ShapeMismatch):
        cal.extract_process_noise(np.zeros((2, 5, 3)), task, chain)


def test_sigma_omega_is_time_averaged_sample_covariance(small_ensemble, task, chain):
    noise = cal.extract_process_noise(small_ensemble, task, chain)
    ref = np.mean([np.cov(noise.omegas[:, k].T) for k in range(task.M)], axis=0)
    assert np.allclose(cal.estimate_sigma_omega(noise), ref, rtol=1e-10, atol=1e-20)


def test_sigma_omega_needs_two_runs(small_ensemble, task, chain):
    noise = cal.extract_process_noise(small_ensemble[:1], task, chain)
    with pytest.raises(InsufficientRuns):
        cal.estimate_sigma_omega(noise)


def _problem(seed):
    r = RngStream(seed)
    q = r.uniform(-1.0, 1.0, 3) + np.array([0.3, 1.2, 0.9])
    J = jacobian(q)
    xdot = r.uniform(-0.2, 0.2, 3)
    omega = 0.3 * np.linalg.norm(np.linalg.solve(J, xdot * 0.01)) * r.standard_normal(3)
    return omega, J, xdot


def _brute_force(omega, J, xdot, dt, w):
    J1, J2, _ = split_factors(J)
    K, v = np.linalg.inv(J2), np.linalg.solve(J1, xdot * dt)
    iu = np.triu_indices(3)

    def f(x):
        P = np.zeros((3, 3))
        P[iu] = x
        P = P + np.triu(P, 1).T
        return cal.b_recovery_objective(P, omega, K, v, w)

    x0 = np.eye(3)[iu]
    best = min((minimize(f, x0 + 0.01 * k, method="Nelder-Mead", options={"xatol": 1e-12, "fatol": 1e-16, "maxiter": 20000})
                for k in range(3)), key=lambda r: r.fun)
    return best.fun, lambda B: f(np.linalg.inv(B)[iu])


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("a1", [0.5, 0.9])
def test_recover_B_reaches_global_minimum(seed, a1):
    """The exact solver's objective is no worse than a derivative-free search."""
    omega, J, xdot = _problem(seed)
    w = cal.CalibrationWeights(a1, 1 - a1)
    B = cal.recover_B(omega, J, xdot, 0.01, w, eig_floor=1e-3)
    ref, objective = _brute_force(omega, J, xdot, 0.01, w)
    assert objective(B) <= ref + 1e-9


def test_recover_B_identity_when_noise_is_zero():
    _, J, xdot = _problem(0)
    assert np.allclose(cal.recover_B(np.zeros(3), J, xdot, 0.01), np.eye(3))


def test_recover_B_explains_noise_generated_by_a_perturbation():
    """With the data term dominant, a noise realization produced by some B is fitted exactly."""
    _, J, xdot = _problem(1)
    Btrue = sample_perturbation(RngStream(0), MaxEntWishartModel(0.2))
    J1, J2, _ = split_factors(J)
    omega = (np.linalg.inv(J1 @ Btrue @ J2) - np.linalg.inv(J)) @ xdot * 0.01
    B = cal.recover_B(omega, J, xdot, 0.01, cal.CalibrationWeights(0.999, 0.001))
    fit = (np.linalg.inv(J1 @ B @ J2) - np.linalg.inv(J)) @ xdot * 0.01
    assert np.linalg.norm(fit - omega) < 1e-6 * np.linalg.norm(omega)


def test_recover_B_respects_eigenvalue_floor():
    omega, J, xdot = _problem(2)
    B = cal.recover_B(50 * omega, J, xdot, 0.01, cal.CalibrationWeights(0.99, 0.01), eig_floor=0.2)
    assert np.linalg.eigvalsh(np.linalg.inv(B)).min() >= 0.2 - 1e-9
    assert np.allclose(B, B.T)


def test_recover_B_batch_matches_loop():
    probs = [_problem(s) for s in range(4)]
    om, J, xd = (np.stack(a) for a in zip(*probs))
    batch = cal.recover_B_batch(om, J, xd, 0.01)
    for i, (o, j, x) in enumerate(probs):
        assert np.allclose(batch[i], cal.recover_B(o, j, x, 0.01), atol=1e-10)


def test_estimate_dispersion_recovers_model_value():
    B = sample_perturbation(RngStream(8), MaxEntWishartModel(0.25), (10, 5000))
    assert cal.estimate_dispersion(B) == pytest.approx(0.25, rel=0.02)


def test_estimate_dispersion_needs_samples():
    with pytest.raises(InsufficientSamples):
        cal.estimate_dispersion([np.eye(3)[None]])
    with pytest.raises(InsufficientSamples):
        cal.estimate_dispersion([])


def test_moment_distance_zero_for_identical_data(small_ensemble):
    assert cal.moment_distance(small_ensemble, small_ensemble, cal.CalibrationWeights()) == 0.0


def test_moment_distance_is_scale_free(small_ensemble):
    shifted = small_ensemble + 1e-3
    w = cal.CalibrationWeights()
    d1 = cal.moment_distance(shifted, small_ensemble, w)
    d2 = cal.moment_distance(10 * shifted, 10 * small_ensemble, w)
    assert d1 == pytest.approx(d2, rel=1e-9)


def test_calibrate_models_end_to_end(small_ensemble, task, chain):
    res = cal.calibrate_models(small_ensemble, task, chain, step_stride=8)
    models = res.models()
    assert set(models) == {"additive", "wishart", "gaussian"}
    assert 0 < res.sigma_B < 1
    assert res.gaussian.u > res.gaussian.jac_norm_max
    assert 0 < res.gaussian.alpha <= 1
    d = res.to_dict()
    assert d["sigma_B"] == res.sigma_B and len(d["sigma_omega"]) == 3


def test_gaussian_fit_is_reproducible(small_ensemble, task, chain):
    kw = dict(margins=(1.0, 4.0), alphas=(0.05, 0.2), refine_rounds=0)
    a = cal.fit_gaussian_params(small_ensemble, task, chain, **kw)
    b = cal.fit_gaussian_params(small_ensemble, task, chain, **kw)
    assert (a.u, a.alpha, a.objective) == (b.u, b.alpha, b.objective)
    assert len(a.evaluations) == 4

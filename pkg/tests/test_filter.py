import csv
import io

import numpy as np
import pytest

from rmtunc import filter as pf
from rmtunc.errors import DomainError, ShapeMismatch, WeightCollapse
from rmtunc.jacobian_models import AdditiveGaussianModel, MaxEntWishartModel
from rmtunc.manipulator import CONSTANT, GroundTruthLaw, quintic_line_task, simulate_ensemble, simulate_model_ensemble
from rmtunc.specfun import RngStream


@pytest.fixture(scope="module")
def short_task(chain):
    return quintic_line_task(duration=0.4, chain=chain)


def _const_sensor(std, n=3):
    return pf.SensorModel(bias=lambda k: np.zeros(n), noise_std=lambda k: np.full(n, std))


def test_particle_set_invariants():
    ps = pf.ParticleSet(np.zeros((4, 3)), [0.1, 0.2, 0.3, 0.4])
    assert 1.0 <= ps.ess <= 4.0
    assert pf.ParticleSet.at([0, 0, 0], 5).ess == pytest.approx(5.0)
    with pytest.raises(DomainError):
        pf.ParticleSet(np.zeros((2, 3)), [0.7, 0.7])
    with pytest.raises(ShapeMismatch):
        pf.ParticleSet(np.zeros((2, 3)), [1.0])


def test_weighted_moments():
    ps = pf.ParticleSet(np.array([[0.0], [2.0]]), [0.25, 0.75])
    mu, cov = ps.mean_cov()
    assert mu[0] == pytest.approx(1.5)
    assert cov[0, 0] == pytest.approx(0.75)


@pytest.mark.parametrize("seed", range(5))
def test_systematic_resample_counts(seed):
    r = RngStream(seed)
    w = r.uniform(size=200)
    w /= w.sum()
    counts = np.bincount(pf.systematic_resample(r, w), minlength=200)
    assert counts.sum() == 200
    assert np.all(counts >= np.floor(200 * w)) and np.all(counts <= np.ceil(200 * w))


def test_synthetic_sensor_profile():
    s = pf.synthetic_sensor(100)
    assert np.allclose(s.bias(0), 0.0) and np.allclose(s.bias(100), 0.02)
    assert np.allclose(s.noise_std(25), 0.015)
    with pytest.raises(DomainError):
        pf.synthetic_sensor(100, std_base=0.005, std_amp=0.005)


def test_stationary_view_is_rms():
    s = pf.synthetic_sensor(100)
    v = pf.stationary_view(s, 100)
    ref = np.sqrt(np.mean([(0.01 + 0.005 * np.sin(2 * np.pi * k / 100)) ** 2 for k in range(1, 101)]))
    assert np.allclose(v.noise_std(3), ref)
    assert np.allclose(v.bias(50), s.bias(50))


def test_sensor_measurement_statistics():
    sensor = pf.SensorModel(bias=lambda k: np.full(3, 0.1), noise_std=lambda k: np.array([0.01, 0.02, 0.03]))
    y = sensor.measure(RngStream(0), np.zeros((20001, 3)))
    assert np.all(np.isnan(y[0]))
    assert np.allclose(y[1:].mean(0), 0.1, atol=1e-3)
    assert np.allclose(y[1:].std(0), [0.01, 0.02, 0.03], rtol=0.03)


def test_zero_noise_limit_tracks_truth(short_task, chain):
    truth = simulate_ensemble(RngStream(0), chain, short_task, GroundTruthLaw(0.0), 1)[0]
    sensor = _const_sensor(1e-9)
    obs = sensor.measure(RngStream(1), truth)
    model = AdditiveGaussianModel(np.zeros((3, 3)))
    rep = pf.sis_run(RngStream(2), model, sensor, obs, short_task, chain, N=50, truth=truth)
    assert np.abs(rep.error).max() < 1e-6


def test_single_particle_is_open_loop(short_task, chain):
    model = MaxEntWishartModel(0.2)
    open_loop = simulate_model_ensemble(RngStream(4).child(0), model, short_task, chain, 1)[0]
    obs = np.full((short_task.M + 1, 3), 0.5)
    rep = pf.sis_run(RngStream(4), model, _const_sensor(1.0), obs, short_task, chain, N=1)
    assert np.array_equal(rep.mean, open_loop)


def test_weight_collapse_reported(short_task, chain):
    obs = np.full((short_task.M + 1, 3), 100.0)
    model = AdditiveGaussianModel(1e-8 * np.eye(3))
    with pytest.raises(WeightCollapse):
        pf.sis_run(RngStream(0), model, _const_sensor(1e-3), obs, short_task, chain, N=20)


def test_filter_input_validation(short_task, chain):
    model = AdditiveGaussianModel(np.zeros((3, 3)))
    with pytest.raises(ShapeMismatch):
        pf.sis_run(RngStream(0), model, _const_sensor(1.0), np.zeros((3, 3)), short_task, chain)
    with pytest.raises(ValueError):
        pf.sis_run(RngStream(0), model, _const_sensor(1.0), np.zeros((short_task.M + 1, 3)), short_task, chain,
                   resample_policy="multinomial")


def test_resampling_keeps_reported_ess_sane(short_task, chain):
    truth = simulate_ensemble(RngStream(0), chain, short_task, GroundTruthLaw(), 1)[0]
    sensor = _const_sensor(0.002)
    obs = sensor.measure(RngStream(1), truth)
    model = AdditiveGaussianModel(1e-5 * np.eye(3))
    rep = pf.sis_run(RngStream(2), model, sensor, obs, short_task, chain, N=300, truth=truth)
    assert rep.resample_steps
    assert np.all((rep.ess >= 1.0 - 1e-9) & (rep.ess <= 300 + 1e-9))
    assert np.all(np.linalg.eigvalsh(rep.cov).min(-1) >= -1e-15)
    plain = pf.sis_run(RngStream(2), model, sensor, obs, short_task, chain, N=300, resample_policy=pf.NO_RESAMPLING)
    assert plain.resample_steps == []


def test_calibrated_gaussian_toy_coverage(chain):
    """Filter whose motion and sensor models are exact: 1-sigma coverage near 0.683."""
    task = quintic_line_task(duration=1.0, chain=chain)
    cov = 4e-6 * np.eye(3)
    law = GroundTruthLaw(mode=CONSTANT, constant_cov=cov)
    sensor = _const_sensor(0.003)
    model = AdditiveGaussianModel(cov)
    reports = []
    for i in range(40):
        truth = simulate_ensemble(RngStream(30, (0, i)), chain, task, law, 1)[0]
        obs = sensor.measure(RngStream(30, (1, i)), truth)
        reports.append(pf.sis_run(RngStream(30, (2, i)), model, sensor, obs, task, chain, N=500, truth=truth))
    cov_frac = pf.bound_quality_metrics(reports)["coverage"]
    assert cov_frac == pytest.approx(0.683, abs=0.03)


def test_constant_bounds_have_zero_cov():
    rep = pf.FilterReport(mean=np.zeros((5, 3)), cov=np.broadcast_to(np.eye(3), (5, 3, 3)).copy(), ess=np.ones(5),
                          truth=np.full((5, 3), 0.5))
    m = pf.bound_quality_metrics([rep])
    assert m["bound_cov"] == 0.0
    assert m["coverage"] == 1.0
    assert m["mean_abs_error"] == pytest.approx(0.5)
    with pytest.raises(ValueError):
        pf.bound_quality_metrics([])


def test_report_csv_layout(tmp_path):
    rep = pf.FilterReport(mean=np.full((2, 3), 1 / 3), cov=np.broadcast_to(np.eye(3) * 4, (2, 3, 3)).copy(),
                          ess=np.ones(2), truth=np.zeros((2, 3)))
    path = tmp_path / "r.csv"
    pf.write_report_csv(path, rep, 0.01)
    rows = list(csv.reader(io.StringIO(path.read_text())))
    assert rows[0] == pf.REPORT_COLUMNS
    assert rows[1][2] == "0.333333333333333"
    assert rows[2][1] == "0.01" and rows[2][5] == "2"

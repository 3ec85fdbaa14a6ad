"""Sequential importance sampling over the random-Jacobian motion models.

The filter propagates particles through a motion model, reweights them by a
Gaussian sensor likelihood and reports the weighted mean, covariance and the
1-sigma bounds. A synthetic joint sensor with a drifting bias and
time-varying noise stands in for a real depth camera.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DomainError, ShapeMismatch, WeightCollapse
from .jacobian_models import step_with_jacobian
from .manipulator import ChainSpec, TrajectoryTask, jacobian
from .specfun import RngStream

NO_RESAMPLING = "none"
SYSTEMATIC = "systematic"
LIKELIHOOD_FLOOR = 1e-300
_LOG_FLOOR = np.log(LIKELIHOOD_FLOOR)


@dataclass
class ParticleSet:
    states: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        w = np.asarray(self.weights, dtype=float)
        if w.shape != self.states.shape[:1]:
            raise ShapeMismatch("one weight per particle required")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise DomainError("weights must be non-negative and sum to 1")
        self.weights = w

    @classmethod
    def at(cls, q0, n: int) -> "ParticleSet":
        return cls(np.tile(np.asarray(q0, dtype=float), (n, 1)), np.full(n, 1.0 / n))

    @property
    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights**2))

    def mean_cov(self):
        mu = self.weights @ self.states
        d = self.states - mu
        cov = (self.weights[:, None] * d).T @ d
        return mu, 0.5 * (cov + cov.T)


@dataclass(frozen=True)
class SensorModel:
    """``y_k = q_k + bias(k) + v``, ``v ~ N(0, diag(noise_std(k)^2))``."""

    bias: Callable[[int], np.ndarray]
    noise_std: Callable[[int], np.ndarray]

    def measure(self, rng: RngStream, q_true: np.ndarray) -> np.ndarray:
        """Observations of states ``q_true[k]`` for ``k = 1..len-1``; row 0 is NaN."""
        q_true = np.asarray(q_true, dtype=float)
        y = np.full_like(q_true, np.nan)
        for k in range(1, q_true.shape[0]):
            std = self._std(k)
            y[k] = q_true[k] + self.bias(k) + std * rng.standard_normal(q_true.shape[-1])
        return y

    def _std(self, k):
        std = np.asarray(self.noise_std(k), dtype=float)
        if np.any(~(std > 0)):
            raise DomainError(f"sensor noise std must be > 0 (step {k})")
        return std

    def log_likelihood(self, k: int, y: np.ndarray, states: np.ndarray) -> np.ndarray:
        std = self._std(k)
        z = (y - self.bias(k) - states) / std
        return -0.5 * np.sum(z * z, axis=-1) - np.sum(np.log(std)) - 0.5 * states.shape[-1] * np.log(2 * np.pi)


def synthetic_sensor(M: int, bias_end: float = 0.02, std_base: float = 0.01, std_amp: float = 0.005, n: int = 3) -> SensorModel:
    """Bias ramping linearly from 0 to ``bias_end`` over ``M`` steps and noise
    std ``std_base + std_amp sin(2 pi k / M)`` on every joint (rad)."""
    if std_base - abs(std_amp) <= 0:
        raise DomainError("sensor noise std would reach zero")
    return SensorModel(
        bias=lambda k: np.full(n, bias_end * k / M),
        noise_std=lambda k: np.full(n, std_base + std_amp * np.sin(2 * np.pi * k / M)),
    )


def stationary_view(sensor: SensorModel, M: int) -> SensorModel:
    """Same bias, noise std replaced by its RMS over steps ``1..M``.

    This is what a filter designer who calibrated the bias but not the
    time-varying noise level would use.
    """
    rms = np.sqrt(np.mean([np.asarray(sensor.noise_std(k)) ** 2 for k in range(1, M + 1)], axis=0))
    return SensorModel(bias=sensor.bias, noise_std=lambda k: rms)


@dataclass
class FilterReport:
    """Per-step posterior summaries; row 0 is the (known) start state."""

    mean: np.ndarray
    cov: np.ndarray
    ess: np.ndarray
    truth: Optional[np.ndarray] = None
    resample_steps: list = field(default_factory=list)

    @property
    def bound(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diagonal(self.cov, axis1=-2, axis2=-1), 0.0, None))

    @property
    def error(self) -> np.ndarray:
        if self.truth is None:
            raise ValueError("report has no ground truth attached")
        return self.mean - self.truth


def systematic_resample(rng: RngStream, weights: np.ndarray) -> np.ndarray:
    """Indices drawn by systematic resampling (one uniform offset, ``N`` strata)."""
    n = weights.size
    positions = (rng.uniform() + np.arange(n)) / n
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, positions, side="right")


def sis_run(
    rng: RngStream,
    motion_model,
    sensor: SensorModel,
    observations: np.ndarray,
    task: TrajectoryTask,
    chain: ChainSpec = ChainSpec(),
    N: int = 1000,
    resample_policy: str = SYSTEMATIC,
    truth: Optional[np.ndarray] = None,
) -> FilterReport:
    """Run the filter over ``observations`` (rows ``1..M`` used).

    Particles start at ``task.q0``. Each step propagates every particle with
    the motion model, multiplies its weight by the sensor likelihood (floored
    at 1e-300) and, under the systematic policy, resamples when the effective
    sample size drops below ``N/2``. Reported moments are taken after the
    weight update and before resampling.
    """
    if resample_policy not in (NO_RESAMPLING, SYSTEMATIC):
        raise ValueError(f"unknown resample policy {resample_policy!r}")
    if N < 1:
        raise DomainError("need at least one particle")
    obs = np.asarray(observations, dtype=float)
    M = task.M
    if obs.shape[0] != M + 1:
        raise ShapeMismatch(f"expected {M + 1} observation rows, got {obs.shape[0]}")
    prop_rng, res_rng = rng.child(0), rng.child(1)
    ps = ParticleSet.at(task.q0, N)
    n = ps.states.shape[1]
    mean = np.empty((M + 1, n))
    cov = np.empty((M + 1, n, n))
    ess = np.empty(M + 1)
    mean[0], cov[0] = ps.mean_cov()
    ess[0] = ps.ess
    resampled = []
    log_w = np.log(ps.weights)
    for k in range(M):
        states = step_with_jacobian(prop_rng, motion_model, ps.states, jacobian(ps.states, chain), task.ee_velocities[k], task.dt)
        ll = sensor.log_likelihood(k + 1, obs[k + 1], states)
        if np.all(ll <= _LOG_FLOOR):
            raise WeightCollapse(f"every particle likelihood underflowed at step {k + 1}")
        log_w = log_w + np.maximum(ll, _LOG_FLOOR)
        log_w -= log_w.max()
        w = np.exp(log_w)
        total = w.sum()
        w /= total
        log_w -= np.log(total)
        ps = ParticleSet(states, w)
        mean[k + 1], cov[k + 1] = ps.mean_cov()
        ess[k + 1] = ps.ess
        if resample_policy == SYSTEMATIC and ps.ess < N / 2:
            idx = systematic_resample(res_rng, w)
            ps = ParticleSet(states[idx], np.full(N, 1.0 / N))
            log_w = np.full(N, -np.log(N))
            resampled.append(k + 1)
    return FilterReport(mean=mean, cov=cov, ess=ess, truth=truth, resample_steps=resampled)


def _cov(x: np.ndarray) -> float:
    m = float(np.mean(x))
    return float(np.std(x) / m) if m > 0 else 0.0


def bound_quality_metrics(reports) -> dict:
    """Summaries over steps ``1..M`` of one or more runs with ground truth.

    * ``mean_abs_error``: mean of ``|error|`` over runs, steps and joints.
    * ``bound_cov``: coefficient of variation over time of the run-averaged
      1-sigma bound (averaged over joints).
    * ``coverage``: fraction of (run, step, joint) entries with
      ``|error| <= bound``.
    * ``bound_error_corr``: Pearson correlation over time between the
      run-averaged bound and the run-averaged ``|error|``.
    """
    reports = list(reports)
    if not reports:
        raise ValueError("need at least one report")
    err = np.abs(np.stack([r.error[1:] for r in reports]))
    bound = np.stack([r.bound[1:] for r in reports])
    bound_series = bound.mean(axis=(0, 2))
    err_series = err.mean(axis=(0, 2))
    if np.std(bound_series) > 0 and np.std(err_series) > 0:
        corr = float(np.corrcoef(bound_series, err_series)[0, 1])
    else:
        corr = 0.0
    return {
        "mean_abs_error": float(err.mean()),
        "bound_cov": _cov(bound_series),
        "coverage": float(np.mean(err <= bound)),
        "bound_error_corr": corr,
    }


REPORT_COLUMNS = ["k", "t"] + [f"{p}{j}" for p in ("mean", "std", "err", "bound") for j in (1, 2, 3)]


def report_rows(report: FilterReport, dt: float):
    """Rows ``(k, t, mean1..3, std1..3, err1..3, bound1..3)``; the 1-sigma bound equals the std."""
    err = report.error if report.truth is not None else np.full_like(report.mean, np.nan)
    std = report.bound
    for k in range(report.mean.shape[0]):
        yield [k, k * dt, *report.mean[k], *std[k], *err[k], *std[k]]


def write_report_csv(path, report: FilterReport, dt: float, fmt: Callable[[float], str] = lambda x: f"{x:.15g}") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in report_rows(report, dt):
            writer.writerow([row[0]] + [fmt(float(x)) for x in row[1:]])


def filter_experiment(
    rng: RngStream,
    models: dict,
    task: TrajectoryTask,
    chain: ChainSpec = ChainSpec(),
    law=None,
    sensor: Optional[SensorModel] = None,
    runs: int = 50,
    N: int = 1000,
    resample_policy: str = SYSTEMATIC,
    map_fn=map,
):
    """Filter ``runs`` synthetic ground-truth executions with every model.

    Ground truth run ``i`` and its observations come from ``rng.child(0, i)``
    and ``rng.child(1, i)``; the filter for model ``j`` on run ``i`` uses
    ``rng.child(2, j, i)``. The filters see the sensor through
    :func:`stationary_view`, i.e. the bias is known but the noise level is
    taken as constant. ``map_fn`` may be a pool's ordered ``map``; every
    unit of work owns its stream, so results do not depend on scheduling.
    Returns ``(reports, metrics)`` keyed by model name.
    """
    from .manipulator import GroundTruthLaw, simulate_ensemble

    law = GroundTruthLaw() if law is None else law
    sensor = synthetic_sensor(task.M) if sensor is None else sensor
    belief = stationary_view(sensor, task.M)
    truths = [simulate_ensemble(rng.child(0, i), chain, task, law, 1)[0] for i in range(runs)]
    observations = [sensor.measure(rng.child(1, i), q) for i, q in enumerate(truths)]
    names = list(models)

    def one(job):
        j, i = job
        return sis_run(rng.child(2, j, i), models[names[j]], belief, observations[i], task, chain, N, resample_policy, truth=truths[i])

    done = list(map_fn(one, [(j, i) for j in range(len(names)) for i in range(runs)]))
    reports = {name: done[j * runs:(j + 1) * runs] for j, name in enumerate(names)}
    metrics = {name: bound_quality_metrics(reports[name]) for name in names if runs}
    return reports, metrics

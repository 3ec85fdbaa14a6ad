"""Planar three-link serial chain, desired trajectories and a synthetic
ground-truth ensemble generator.

The ground truth integrates the inverse differential kinematics with
injected joint noise. In ``velocity-scaled`` mode the per-step noise standard
deviation is ``c * ||J^-1 xdot|| * dt``, so the true uncertainty level changes
along the path; in ``constant`` mode it is fixed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import JointLimitError, NearSingularTrajectory
from .specfun import RngStream

VELOCITY_SCALED = "velocity-scaled"
CONSTANT = "constant"

# youBot-like link lengths (m) for the three moving links
DEFAULT_LINKS = (0.155, 0.135, 0.218)
MIN_SINGULAR_VALUE = 1e-3
# per-step noise std is this fraction of the commanded joint step
DEFAULT_NOISE_GAIN = 0.3


@dataclass(frozen=True)
class ChainSpec:
    link_lengths: tuple = DEFAULT_LINKS
    joint_limits: tuple = ((-np.pi, np.pi),) * 3

    def __post_init__(self):
        lengths = tuple(float(v) for v in self.link_lengths)
        if len(lengths) != 3 or min(lengths) <= 0:
            raise ValueError("need three positive link lengths")
        object.__setattr__(self, "link_lengths", lengths)
        object.__setattr__(self, "joint_limits", tuple(tuple(map(float, lim)) for lim in self.joint_limits))

    def check_limits(self, q) -> None:
        q = np.asarray(q, dtype=float)
        lim = np.asarray(self.joint_limits)
        if np.any(q < lim[:, 0]) or np.any(q > lim[:, 1]):
            raise JointLimitError("joint configuration outside limits")


@dataclass(frozen=True)
class TrajectoryTask:
    """Desired end-effector velocities ``xdot_k`` (k = 0..M-1) from a start pose."""

    q0: np.ndarray
    ee_velocities: np.ndarray
    dt: float
    x0: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        object.__setattr__(self, "q0", np.asarray(self.q0, dtype=float))
        object.__setattr__(self, "ee_velocities", np.atleast_2d(np.asarray(self.ee_velocities, dtype=float)))

    @property
    def M(self) -> int:
        return self.ee_velocities.shape[0]

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.M + 1) * self.dt


@dataclass(frozen=True)
class GroundTruthLaw:
    noise_gain: float = DEFAULT_NOISE_GAIN
    mode: str = VELOCITY_SCALED
    constant_cov: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        if self.noise_gain < 0:
            raise ValueError("noise_gain must be >= 0")
        if self.mode not in (VELOCITY_SCALED, CONSTANT):
            raise ValueError(f"unknown ground-truth mode {self.mode!r}")


def _joint_positions(q: np.ndarray, chain: ChainSpec):
    phi = np.cumsum(q, axis=-1)
    lengths = np.asarray(chain.link_lengths)
    dx = lengths * np.cos(phi)
    dy = lengths * np.sin(phi)
    # positions of joint 1..3 origins and the end effector
    zeros = np.zeros(q.shape[:-1] + (1,))
    xs = np.concatenate([zeros, np.cumsum(dx, axis=-1)], axis=-1)
    ys = np.concatenate([zeros, np.cumsum(dy, axis=-1)], axis=-1)
    return xs, ys, phi


def forward_kinematics(q, chain: ChainSpec = ChainSpec(), check_limits: bool = True) -> np.ndarray:
    """End-effector pose ``(x, y, phi)``; works on stacks of shape ``(..., 3)``."""
    q = np.asarray(q, dtype=float)
    if check_limits:
        chain.check_limits(q)
    xs, ys, phi = _joint_positions(q, chain)
    return np.stack([xs[..., -1], ys[..., -1], phi[..., -1]], axis=-1)


def jacobian(q, chain: ChainSpec = ChainSpec()) -> np.ndarray:
    """Planar Jacobian; column j is ``[-(y - y_j), x - x_j, 1]`` for joint j at ``(x_j, y_j)``."""
    q = np.asarray(q, dtype=float)
    xs, ys, _ = _joint_positions(q, chain)
    J = np.empty(q.shape[:-1] + (3, 3))
    J[..., 0, :] = -(ys[..., -1:] - ys[..., :3])
    J[..., 1, :] = xs[..., -1:] - xs[..., :3]
    J[..., 2, :] = 1.0
    return J


def chain_jacobian_fn(chain: ChainSpec):
    return lambda q: jacobian(q, chain)


def quintic_line_task(
    q0=(0.3, 1.2, 0.9),
    displacement=(0.12, 0.06, -0.6),
    duration: float = 3.2,
    dt: float = 0.01,
    chain: ChainSpec = ChainSpec(),
) -> TrajectoryTask:
    """Straight-line end-effector move with a quintic time-scaling profile.

    Velocity is zero at both ends and peaks mid-way. The defaults give the
    reference ``M = 320`` steps of 10 ms.
    """
    M = int(round(duration / dt))
    t = np.arange(M) * dt
    tau = t / duration
    sdot = (30 * tau**2 - 60 * tau**3 + 30 * tau**4) / duration
    xdot = sdot[:, None] * np.asarray(displacement, dtype=float)
    q0 = np.asarray(q0, dtype=float)
    return TrajectoryTask(q0=q0, ee_velocities=xdot, dt=dt, x0=forward_kinematics(q0, chain))


def nominal_trajectory(task: TrajectoryTask, chain: ChainSpec = ChainSpec()) -> np.ndarray:
    """Noise-free integration of ``q+ = q + J^-1 xdot dt``; shape ``(M+1, 3)``."""
    q = np.empty((task.M + 1, 3))
    q[0] = task.q0
    for k in range(task.M):
        J = jacobian(q[k], chain)
        if np.linalg.svd(J, compute_uv=False)[-1] <= MIN_SINGULAR_VALUE:
            raise NearSingularTrajectory(f"nominal path reaches a near-singular configuration at step {k}")
        q[k + 1] = q[k] + np.linalg.solve(J, task.ee_velocities[k] * task.dt)
    return q


def min_singular_values(q: np.ndarray, chain: ChainSpec = ChainSpec()) -> np.ndarray:
    return np.linalg.svd(jacobian(q, chain), compute_uv=False)[..., -1]


def joint_speed_series(q: np.ndarray, task: TrajectoryTask, chain: ChainSpec = ChainSpec()) -> np.ndarray:
    """``||J(q_k)^-1 xdot_k||`` along a trajectory of shape ``(..., M+1, 3)``."""
    qdot = np.linalg.solve(jacobian(q[..., :-1, :], chain), task.ee_velocities[..., None])[..., 0]
    return np.linalg.norm(qdot, axis=-1)


def simulate_ensemble(
    rng: RngStream,
    chain: ChainSpec,
    task: TrajectoryTask,
    law: GroundTruthLaw,
    runs: int,
) -> np.ndarray:
    """Repeated noisy executions of ``task``; returns shape ``(runs, M+1, 3)``.

    Run ``i`` draws its noise from ``rng.child(i)``, so any subset of runs is
    reproducible on its own.
    """
    nominal = nominal_trajectory(task, chain)
    if np.min(min_singular_values(nominal, chain)) <= MIN_SINGULAR_VALUE:
        raise NearSingularTrajectory("nominal path passes within 1e-3 of a singular configuration")
    M = task.M
    noise = np.stack([rng.child(i).standard_normal((M, 3)) for i in range(runs)]) if runs else np.zeros((0, M, 3))
    if law.mode == CONSTANT and law.constant_cov is not None:
        root = np.linalg.cholesky(np.asarray(law.constant_cov, dtype=float))
        noise = noise @ root.T
    q = np.empty((runs, M + 1, 3))
    q[:, 0] = task.q0
    for k in range(M):
        J = jacobian(q[:, k], chain)
        qdot = np.linalg.solve(J, np.broadcast_to(task.ee_velocities[k], (runs, 3))[..., None])[..., 0]
        step = qdot * task.dt
        if law.mode == VELOCITY_SCALED:
            scale = law.noise_gain * np.linalg.norm(qdot, axis=-1, keepdims=True) * task.dt
        elif law.constant_cov is not None:
            scale = 1.0
        else:
            scale = law.noise_gain * task.dt
        q[:, k + 1] = q[:, k] + step + scale * noise[:, k]
    return q


def simulate_model_ensemble(rng: RngStream, model, task: TrajectoryTask, chain: ChainSpec, runs: int) -> np.ndarray:
    """Propagate ``runs`` copies of ``task.q0`` through a stochastic motion model.

    All runs advance together, one batched draw per step; shape ``(runs, M+1, 3)``.
    """
    from .jacobian_models import step_with_jacobian

    q = np.empty((runs, task.M + 1, 3))
    q[:, 0] = task.q0
    for k in range(task.M):
        J = jacobian(q[:, k], chain)
        q[:, k + 1] = step_with_jacobian(rng, model, q[:, k], J, task.ee_velocities[k], task.dt)
    return q

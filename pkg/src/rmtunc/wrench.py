"""Static wrench uncertainty for planar multi-agent cable systems.

Each agent pulls on a common platform with tension ``T_i`` along direction
``theta_i``. Two descriptions of the resulting force uncertainty live here:

* the parametric one, with Gaussian tensions and von Mises directions, whose
  force variances have a closed form in Bessel-function ratios;
* the random-matrix one, ``W = S T`` with matrix-normal ``S`` and Gaussian
  ``T``, whose covariance is ``tr{(Sigma_T + T T^T) Psi_S} Sigma_S + S Sigma_T S^T``.

``estimate_sigma_s`` fits the random-matrix ``Sigma_S`` so that it reproduces
the parametric variances over systems drawn uniformly within known bounds.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DomainError, ShapeMismatch
from .linalg import sym
from .specfun import RngStream, bessel_ratio, vonmises_deviation

# Monte Carlo loops are split into blocks, each with its own derived stream,
# so results do not depend on how blocks are scheduled.
MC_BLOCK = 250_000


@dataclass(frozen=True)
class CableSystemSpec:
    """Per-agent mean tension (N), tension std (N), mean angle (rad) and
    von Mises concentration, plus optional attachment offsets ``r_i`` (m)."""

    mean_tensions: np.ndarray
    tension_stds: np.ndarray
    mean_angles: np.ndarray
    concentrations: np.ndarray
    offsets: Optional[np.ndarray] = None

    def __post_init__(self):
        arrs = [np.atleast_1d(np.asarray(a, dtype=float)) for a in
                (self.mean_tensions, self.tension_stds, self.mean_angles, self.concentrations)]
        m = arrs[0].shape[0]
        if m < 1 or any(a.shape != (m,) for a in arrs):
            raise ShapeMismatch("per-agent parameters must be 1-D arrays of equal length >= 1")
        if np.any(arrs[1] < 0):
            raise DomainError("tension standard deviations must be >= 0")
        if np.any(~(arrs[3] > 0)):
            raise DomainError("von Mises concentrations must be > 0")
        r = np.zeros((m, 2)) if self.offsets is None else np.asarray(self.offsets, dtype=float)
        if r.shape != (m, 2):
            raise ShapeMismatch(f"offsets must have shape {(m, 2)}")
        for name, a in zip(("mean_tensions", "tension_stds", "mean_angles", "concentrations"), arrs):
            object.__setattr__(self, name, a)
        object.__setattr__(self, "offsets", r)

    @property
    def m(self) -> int:
        return self.mean_tensions.shape[0]


@dataclass(frozen=True)
class SystemBounds:
    """Uniform sampling box for system parameters; every agent shares the bounds."""

    concentration: tuple = (100.0, 800.0)
    tension_std: tuple = (0.5, 1.0)
    mean_tension: tuple = (3.0, 5.0)
    mean_angle: tuple = (np.pi / 4, np.pi)

    def __post_init__(self):
        for name in ("concentration", "tension_std", "mean_tension", "mean_angle"):
            lo, hi = (float(v) for v in getattr(self, name))
            if lo > hi:
                raise DomainError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
            object.__setattr__(self, name, (lo, hi))
        if self.concentration[0] <= 0:
            raise DomainError("concentration lower bound must be > 0")
        if self.tension_std[0] < 0:
            raise DomainError("tension std lower bound must be >= 0")

    def sample(self, rng: RngStream, m: int, size: int):
        """Draw ``size`` systems as arrays of shape ``(size, m)``.

        Returns ``(mean_tensions, tension_stds, mean_angles, concentrations)``.
        """
        def draw(lim):
            return rng.uniform(lim[0], lim[1], size=(size, m))

        # draw order is part of the reproducibility contract
        kappa = draw(self.concentration)
        sig_t = draw(self.tension_std)
        t_bar = draw(self.mean_tension)
        th_bar = draw(self.mean_angle)
        return t_bar, sig_t, th_bar, kappa


# bounds of the reference numerical study and of the first three-iRobot configuration
REFERENCE_BOUNDS = SystemBounds()
IROBOT_C1_BOUNDS = SystemBounds(
    concentration=(169.35, 2416.0), tension_std=(0.48, 2.27), mean_tension=(1.82, 13.89), mean_angle=(0.0, 3.8)
)


@dataclass(frozen=True)
class RmtWrenchModel:
    """``W = S T`` with ``S ~ N_{2,m}(mean_S, Sigma_S (x) Psi_S)`` and ``T ~ N_m(mean_T, Sigma_T)``."""

    mean_S: np.ndarray
    Sigma_S: np.ndarray
    mean_T: np.ndarray
    Sigma_T: np.ndarray
    Psi_S: Optional[np.ndarray] = None

    def __post_init__(self):
        S = np.atleast_2d(np.asarray(self.mean_S, dtype=float))
        m = S.shape[1]
        Psi = np.eye(m) if self.Psi_S is None else np.asarray(self.Psi_S, dtype=float)
        shapes = {
            "Sigma_S": (np.asarray(self.Sigma_S, dtype=float), (S.shape[0],) * 2),
            "mean_T": (np.asarray(self.mean_T, dtype=float), (m,)),
            "Sigma_T": (np.asarray(self.Sigma_T, dtype=float), (m, m)),
            "Psi_S": (Psi, (m, m)),
        }
        for name, (a, shape) in shapes.items():
            if a.shape != shape:
                raise ShapeMismatch(f"{name} has shape {a.shape}, expected {shape}")
            object.__setattr__(self, name, a)
        object.__setattr__(self, "mean_S", S)

    @classmethod
    def from_spec(cls, spec: CableSystemSpec, Sigma_S) -> "RmtWrenchModel":
        return cls(
            mean_S=direction_matrix(spec.mean_angles),
            Sigma_S=np.asarray(Sigma_S, dtype=float),
            mean_T=spec.mean_tensions,
            Sigma_T=np.diag(spec.tension_stds**2),
        )


def direction_matrix(angles) -> np.ndarray:
    """Static Jacobian ``[cos; sin]`` of shape ``(..., 2, m)``."""
    angles = np.asarray(angles, dtype=float)
    return np.stack([np.cos(angles), np.sin(angles)], axis=-2)


def wrench_cov_closed_form(model: RmtWrenchModel) -> np.ndarray:
    """``tr{(Sigma_T + T T^T) Psi_S} Sigma_S + S Sigma_T S^T``."""
    second_moment = model.Sigma_T + np.outer(model.mean_T, model.mean_T)
    scale = np.trace(second_moment @ model.Psi_S)
    return sym(scale * model.Sigma_S + model.mean_S @ model.Sigma_T @ model.mean_S.T)


def product_mc_cov(rng: RngStream, model: RmtWrenchModel, n: int, block: int = MC_BLOCK) -> np.ndarray:
    """Monte Carlo covariance of ``W = S T`` with independent ``S`` and ``T``.

    Covariances of ``S`` and ``T`` may be singular (eigen square roots are used).
    """
    p, m = model.mean_S.shape
    A = _psd_root(model.Sigma_S)
    B = _psd_root(model.Psi_S)
    C = _psd_root(model.Sigma_T)
    total = np.zeros(p)
    outer = np.zeros((p, p))
    for b, start in enumerate(range(0, n, block)):
        k = min(block, n - start)
        sub = rng.child(b)
        S = model.mean_S + A @ sub.standard_normal((k, p, m)) @ B.T
        T = model.mean_T + sub.standard_normal((k, m)) @ C.T
        W = np.einsum("kij,kj->ki", S, T)
        total += W.sum(axis=0)
        outer += W.T @ W
    mean = total / n
    return sym((outer - n * np.outer(mean, mean)) / (n - 1))


def _psd_root(S) -> np.ndarray:
    w, V = np.linalg.eigh(sym(np.asarray(S, dtype=float)))
    return V * np.sqrt(np.clip(w, 0.0, None))


# --------------------------------------------------------------------------
# parametric (Gaussian tension, von Mises direction) description


def _variance_terms(t_bar, sig_t, kappa):
    r1, r2 = bessel_ratio(np.asarray(kappa, dtype=float))
    second = t_bar**2 + sig_t**2
    a_bar = second - (r1 * t_bar) ** 2
    b_bar = r2 * second
    return a_bar, b_bar


def _parametric_variance(t_bar, sig_t, th_bar, kappa):
    """Vectorized over leading axes; the last axis indexes agents."""
    if np.any(~(np.asarray(kappa) > 0)):
        raise DomainError("von Mises concentrations must be > 0")
    a_bar, b_bar = _variance_terms(t_bar, sig_t, kappa)
    c2 = np.cos(2.0 * th_bar)
    var_fx = np.sum(a_bar * np.cos(th_bar) ** 2 - b_bar * c2, axis=-1)
    var_fy = np.sum(a_bar * np.sin(th_bar) ** 2 + b_bar * c2, axis=-1)
    return var_fx, var_fy


def parametric_force_variance(spec: CableSystemSpec):
    """Exact ``(Var F_x, Var F_y)`` under Gaussian tensions and von Mises angles.

    With ``r1 = I1/I0`` and ``r2 = I1/(k I0)`` at concentration ``k``:
    ``a = T^2 + s_T^2 - (r1 T)^2``, ``b = r2 (T^2 + s_T^2)`` and
    ``Var F_x = sum a cos^2(theta) - b cos(2 theta)``,
    ``Var F_y = sum a sin^2(theta) + b cos(2 theta)``.
    """
    vx, vy = _parametric_variance(spec.mean_tensions, spec.tension_stds, spec.mean_angles, spec.concentrations)
    return float(vx), float(vy)


def mc_wrench_sample(rng: RngStream, spec: CableSystemSpec, size: Optional[int] = None):
    """Draw ``(F_x, F_y, M_z)`` from the parametric model.

    Tensions and angles are independent across agents and of each other. The
    moment is ``sum r_x f_y - r_y f_x`` and vanishes identically when all
    offsets are zero.
    """
    n = 1 if size is None else int(size)
    m = spec.m
    T = spec.mean_tensions + spec.tension_stds * rng.standard_normal((n, m))
    theta = spec.mean_angles + vonmises_deviation(rng, np.broadcast_to(spec.concentrations, (n, m)))
    fx = T * np.cos(theta)
    fy = T * np.sin(theta)
    rx, ry = spec.offsets[:, 0], spec.offsets[:, 1]
    Fx, Fy, Mz = fx.sum(-1), fy.sum(-1), (rx * fy - ry * fx).sum(-1)
    if size is None:
        return float(Fx[0]), float(Fy[0]), float(Mz[0])
    return Fx, Fy, Mz


def mc_force_moments(rng: RngStream, spec: CableSystemSpec, n: int, block: int = MC_BLOCK):
    """Monte Carlo mean and variance of ``(F_x, F_y)`` over ``n`` draws."""
    s1 = np.zeros(2)
    s2 = np.zeros(2)
    shift = np.array([
        np.sum(spec.mean_tensions * np.cos(spec.mean_angles)),
        np.sum(spec.mean_tensions * np.sin(spec.mean_angles)),
    ])  # centring keeps the one-pass variance accurate
    for b, start in enumerate(range(0, n, block)):
        k = min(block, n - start)
        Fx, Fy, _ = mc_wrench_sample(rng.child(b), spec, k)
        F = np.stack([Fx, Fy], axis=-1) - shift
        s1 += F.sum(axis=0)
        s2 += (F * F).sum(axis=0)
    mean = s1 / n
    var = (s2 - n * mean**2) / (n - 1)
    return mean + shift, var


# --------------------------------------------------------------------------
# fitting Sigma_S from bounds


def _sigma_s_per_system(t_bar, sig_t, th_bar, kappa):
    """Best diagonal ``Sigma_S`` for each sampled system, shape ``(..., 2)``.

    With ``Psi_S = I`` the closed-form diagonal is ``c Sigma_S,jj + (S Sigma_T S^T)_jj``
    where ``c = tr(Sigma_T + T T^T)`` is positive, so matching the parametric
    variances is solved entry by entry and clamped at zero.
    """
    var_fx, var_fy = _parametric_variance(t_bar, sig_t, th_bar, kappa)
    var2 = sig_t**2
    tension_x = np.sum(np.cos(th_bar) ** 2 * var2, axis=-1)
    tension_y = np.sum(np.sin(th_bar) ** 2 * var2, axis=-1)
    c = np.sum(var2 + t_bar**2, axis=-1)
    return np.stack([
        np.maximum(0.0, (var_fx - tension_x) / c),
        np.maximum(0.0, (var_fy - tension_y) / c),
    ], axis=-1)


def estimate_sigma_s(rng: RngStream, bounds: SystemBounds, m: int, n_mc: int = 1000) -> np.ndarray:
    """Average of per-system optimal ``Sigma_S`` over ``n_mc`` systems drawn within ``bounds``.

    Off-diagonal entries are zero: the fit only constrains force variances.
    """
    if n_mc < 1:
        raise DomainError("n_mc must be >= 1")
    if m < 1:
        raise DomainError("m must be >= 1")
    diag = _sigma_s_per_system(*bounds.sample(rng, m, n_mc))
    return np.diag(diag.mean(axis=0))


@dataclass
class HistogramResult:
    m: int
    errors: np.ndarray
    sigma_s: np.ndarray

    @property
    def summary(self) -> dict:
        e = self.errors
        if e.size == 0:
            return {"m": self.m, "mean": None, "max": None, "p95": None}
        return {"m": self.m, "mean": float(e.mean()), "max": float(e.max()), "p95": float(np.percentile(e, 95))}


def closed_form_variances(sigma_s, t_bar, sig_t, th_bar):
    """Diagonal of the closed-form covariance for stacks of systems (``Psi_S = I``)."""
    sigma_s = np.asarray(sigma_s, dtype=float)
    var2 = sig_t**2
    c = np.sum(var2 + t_bar**2, axis=-1)
    vx = c * sigma_s[0, 0] + np.sum(np.cos(th_bar) ** 2 * var2, axis=-1)
    vy = c * sigma_s[1, 1] + np.sum(np.sin(th_bar) ** 2 * var2, axis=-1)
    return vx, vy


def error_histogram_experiment(rng: RngStream, bounds: SystemBounds, m_list, n_train: int = 1000, n_test: int = 2000):
    """Relative error of the fitted random-matrix variances against the parametric truth.

    For each ``m``, ``Sigma_S`` is fitted on ``n_train`` systems and the
    error ``||v_rmt - v_true|| / ||v_true||`` of the variance pair is recorded
    on ``n_test`` fresh systems. Each ``m`` uses streams ``rng.child(m, 0)``
    (training) and ``rng.child(m, 1)`` (testing).
    """
    out = []
    for m in m_list:
        m = int(m)
        sigma_s = estimate_sigma_s(rng.child(m, 0), bounds, m, n_train)
        if n_test > 0:
            t_bar, sig_t, th_bar, kappa = bounds.sample(rng.child(m, 1), m, n_test)
            tx, ty = _parametric_variance(t_bar, sig_t, th_bar, kappa)
            rx, ry = closed_form_variances(sigma_s, t_bar, sig_t, th_bar)
            errors = np.hypot(rx - tx, ry - ty) / np.hypot(tx, ty)
        else:
            errors = np.zeros(0)
        out.append(HistogramResult(m=m, errors=errors, sigma_s=sigma_s))
    return out

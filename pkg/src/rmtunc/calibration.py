"""Fitting the three motion models to an ensemble of measured trajectories.

The pipeline mirrors how the models are used: one-step prediction residuals
give the process noise realizations, which in turn give

* the additive model covariance (time average of per-step covariances),
* perturbation-matrix samples ``B`` and their dispersion ``sigma_B``,
* the Gaussian-model norm bound ``u`` and scale ``alpha`` (moment matching).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .errors import InsufficientRuns, InsufficientSamples, NormBoundViolated, ShapeMismatch, SingularDraw
from .jacobian_models import INVERSE_JACOBIAN, AdditiveGaussianModel, GaussianNoiseMatrixModel, MaxEntWishartModel
from .linalg import split_factors
from .manipulator import ChainSpec, TrajectoryTask, jacobian, nominal_trajectory, simulate_model_ensemble
from .specfun import RngStream

log = logging.getLogger(__name__)

SPD_JITTER = 1e-15


@dataclass(frozen=True)
class CalibrationWeights:
    """Trade-off weights; each pair must be non-negative and sum to one.

    ``alpha1``/``alpha2`` weigh data fit against closeness to identity when
    recovering ``B``; ``beta1``/``beta2`` weigh mean against spread when
    fitting the Gaussian model.
    """

    alpha1: float = 0.5
    alpha2: float = 0.5
    beta1: float = 0.5
    beta2: float = 0.5

    def __post_init__(self):
        for a, b in ((self.alpha1, self.alpha2), (self.beta1, self.beta2)):
            if a < 0 or b < 0 or abs(a + b - 1.0) > 1e-12:
                raise ValueError("weight pairs must be non-negative and sum to 1")


@dataclass
class NoiseEnsemble:
    """Process-noise realizations ``omegas[i, k]`` and the Jacobians ``J(q_k^i)``."""

    omegas: np.ndarray
    mean_J: np.ndarray
    ee_velocities: np.ndarray
    dt: float

    @property
    def runs(self) -> int:
        return self.omegas.shape[0]

    @property
    def M(self) -> int:
        return self.omegas.shape[1]


def extract_process_noise(ensemble, task: TrajectoryTask, chain: ChainSpec = ChainSpec()) -> NoiseEnsemble:
    """One-step prediction residuals ``q_k + J(q_k)^-1 xdot_k dt - q_{k+1}``."""
    q = np.asarray(ensemble, dtype=float)
    if q.ndim == 2:
        q = q[None]
    if q.shape[1] != task.M + 1:
        raise ShapeMismatch(f"ensemble has {q.shape[1]} samples per run, task needs {task.M + 1}")
    J = jacobian(q[:, :-1], chain)
    if np.any(~(np.linalg.cond(J) < 1e12)):
        from .errors import SingularMatrix

        raise SingularMatrix("measured state with singular Jacobian")
    step = np.linalg.solve(J, (task.ee_velocities * task.dt)[None, :, :, None])[..., 0]
    omegas = q[:, :-1] + step - q[:, 1:]
    return NoiseEnsemble(omegas=omegas, mean_J=J, ee_velocities=task.ee_velocities, dt=task.dt)


def estimate_sigma_omega(noise: NoiseEnsemble) -> np.ndarray:
    """Time average of the per-step sample covariances of the process noise."""
    if noise.runs < 2:
        raise InsufficientRuns("need at least two runs to estimate a covariance")
    w = noise.omegas - noise.omegas.mean(axis=0, keepdims=True)
    per_step = np.einsum("rki,rkj->kij", w, w) / (noise.runs - 1)
    S = per_step.mean(axis=0)
    S = 0.5 * (S + S.T)
    if np.linalg.eigvalsh(S)[0] <= 0:
        S = S + SPD_JITTER * np.eye(S.shape[0])
    return S


# --------------------------------------------------------------------------
# perturbation-matrix recovery


def _tril_pack(n):
    return np.tril_indices(n)


def _L_from_params(x, n):
    L = np.zeros((n, n))
    L[_tril_pack(n)] = x
    d = np.arange(n)
    L[d, d] = np.exp(L[d, d])
    return L


def _params_from_L(L):
    n = L.shape[0]
    M = L.copy()
    d = np.arange(n)
    M[d, d] = np.log(M[d, d])
    return M[_tril_pack(n)]


def b_recovery_objective(P, omega, K, v, weights: CalibrationWeights) -> float:
    """``a1 ||omega - K (P - I) v|| + a2 ||P - I||_F`` with ``P = B^-1``.

    This is the data-fit form of ``||omega - (J2^-1 P J1^-1 - J^-1) xdot dt||``
    with ``K = J2^-1`` and ``v = J1^-1 xdot dt``.
    """
    D = P - np.eye(P.shape[0])
    return float(weights.alpha1 * np.linalg.norm(omega - K @ D @ v) + weights.alpha2 * np.linalg.norm(D))


def _sym_basis(n):
    """Orthonormal basis of symmetric ``n x n`` matrices under the Frobenius product."""
    basis = []
    for i in range(n):
        for j in range(i, n):
            E = np.zeros((n, n))
            if i == j:
                E[i, i] = 1.0
            else:
                E[i, j] = E[j, i] = np.sqrt(0.5)
            basis.append(E)
    return np.stack(basis)


def _convex_optimum(omega, K, v, a1, a2, iters=200):
    """Unconstrained minimizer of ``a1 ||omega - K D v|| + a2 ||D||_F`` over symmetric ``D``.

    Batched over the leading axis. In Frobenius-orthonormal coordinates the
    problem is ``min a1 ||omega - A d|| + a2 ||d||``; away from the two
    endpoints (``d = 0`` and the minimum-norm exact fit) the optimum is
    ``d = mu A^T (I + mu A A^T)^-1 omega`` with ``mu`` the root of
    ``||A^T r|| / ||r|| = a2 / a1``, which is monotone decreasing in ``mu``.
    """
    n = K.shape[-1]
    E = _sym_basis(n)
    # A[..., :, b] = K E_b v
    A = np.einsum("...ij,bjk,...k->...ib", K, E, v)
    s, V = np.linalg.eigh(A @ np.swapaxes(A, -1, -2))
    s = np.clip(s, 1e-300, None)
    c2 = np.einsum("...ji,...j->...i", V, omega) ** 2
    target = (a2 / a1) ** 2

    def ratio2(mu):
        w = c2 / (1.0 + mu[..., None] * s) ** 2
        return np.sum(s * w, -1) / np.maximum(np.sum(w, -1), 1e-300)

    zero = ratio2(np.zeros(s.shape[:-1])) <= target
    exact = np.sum(c2 / s, -1) / np.maximum(np.sum(c2 / s**3, -1), 1e-300) >= target
    # bisection on log(mu) between scales bracketing the spectrum
    lo = np.log(1e-6 / s[..., -1])
    hi = np.log(1e6 / s[..., 0])
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        above = ratio2(np.exp(mid)) > target
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
    mu = np.exp(0.5 * (lo + hi))
    AAt_inv = np.einsum("...ik,...k,...jk->...ij", V, 1.0 / s, V)
    d_exact = np.einsum("...ki,...kl,...l->...i", A, AAt_inv, omega)
    r = np.einsum("...ik,...k,...jk,...j->...i", V, 1.0 / (1.0 + mu[..., None] * s), V, omega)
    d_mid = mu[..., None] * np.einsum("...ki,...k->...i", A, r)
    d = np.where(exact[..., None], d_exact, d_mid)
    d = np.where(zero[..., None], 0.0, d)
    return np.einsum("...b,bij->...ij", d, E)


def _bfgs_spd(omega, K, v, a1, a2, x0, floor):
    """Search over ``B^-1 = floor I + L L^T`` for when the convex optimum leaves that set."""
    n = K.shape[0]
    I = np.eye(n)
    eps1 = 1e-10 * (np.linalg.norm(omega) + np.linalg.norm(K @ v))
    eps2 = 1e-10

    def fun(x):
        L = _L_from_params(x, n)
        D = floor * I + L @ L.T - I
        r = omega - K @ D @ v
        nr = np.sqrt(r @ r + eps1**2)
        nd = np.sqrt(np.sum(D * D) + eps2**2)
        f = a1 * (nr - eps1) + a2 * (nd - eps2)
        G = -a1 * np.outer(K.T @ r, v) / nr + a2 * D / nd
        gL = (G + G.T) @ L
        gL[np.diag_indices(n)] *= np.diag(L)
        return f, gL[_tril_pack(n)]

    res = minimize(fun, x0, jac=True, method="BFGS", options={"gtol": 1e-12, "maxiter": 500})
    x = res.x if np.isfinite(res.fun) and res.fun <= fun(x0)[0] else x0
    L = _L_from_params(x, n)
    return floor * I + L @ L.T


# Smallest eigenvalue allowed for B^-1, i.e. B <= 5 I. Without a floor the
# optimum can sit on the PSD boundary, where B is unbounded and a handful of
# such samples would dominate the dispersion estimate. A Wishart law with
# sigma_B near 0.25 puts essentially no mass beyond this bound.
INVERSE_EIG_FLOOR = 0.2


def recover_B_batch(
    omega,
    mean_J,
    ee_vel,
    dt: float,
    weights: CalibrationWeights = CalibrationWeights(),
    eig_floor: float = INVERSE_EIG_FLOOR,
    relative: bool = False,
) -> np.ndarray:
    """Perturbation-matrix samples explaining process-noise realizations.

    Minimizes ``a1 ||omega - (J2^-1 B^-1 J1^-1 - J^-1) xdot dt|| + a2 ||B^-1 - I||_F``
    over ``B^-1 >= eig_floor I``, where ``J = J1 J2`` is the factor split used
    by the Wishart model. The objective is convex, so the unconstrained
    optimum is computed exactly; cases where it violates the eigenvalue
    floor are finished by a search over ``B^-1 = eig_floor I + L L^T``
    started from the optimum shrunk back into the feasible set. Inputs
    broadcast over leading axes.

    With ``relative=True`` the data-fit term is divided by the commanded
    joint step ``||J^-1 xdot dt||``, which makes the weights dimensionless.
    This is the same objective with ``alpha1`` rescaled per sample, so each
    returned ``B`` is still an exact minimizer for some weight pair.
    """
    if not 0 < eig_floor < 1:
        raise ValueError("eig_floor must lie in (0, 1)")
    omega = np.asarray(omega, dtype=float)
    mean_J = np.asarray(mean_J, dtype=float)
    n = mean_J.shape[-1]
    batch = np.broadcast_shapes(omega.shape[:-1], mean_J.shape[:-2], np.shape(ee_vel)[:-1])
    omega = np.broadcast_to(omega, batch + (n,)).reshape(-1, n)
    mean_J = np.broadcast_to(mean_J, batch + (n, n)).reshape(-1, n, n)
    xdt = np.broadcast_to(np.asarray(ee_vel, dtype=float) * dt, batch + (n,)).reshape(-1, n)
    I = np.eye(n)
    out = np.broadcast_to(I, omega.shape[:1] + (n, n)).copy()
    a1, a2 = weights.alpha1, weights.alpha2
    if a1 == 0 or omega.shape[0] == 0:
        return out.reshape(batch + (n, n))

    J1, J2, _ = split_factors(mean_J)
    K = np.linalg.inv(J2)
    v = np.linalg.solve(J1, xdt[..., None])[..., 0]
    live = np.any(omega != 0, -1) & np.any(v != 0, -1)
    if relative:
        step = np.linalg.norm(K @ v[..., None], axis=(-2, -1))
        scale = np.where(step > 0, step, 1.0)
        omega = omega / scale[:, None]
        K = K / scale[:, None, None]
    if a2 == 0:
        # pure data fit: the minimum-norm exact fit is one of many minimizers
        a2 = 1e-300
    D = np.zeros_like(out)
    if np.any(live):
        D[live] = _convex_optimum(omega[live], K[live], v[live], a1, a2)
    P = I + D
    lam = np.linalg.eigvalsh(P)[:, 0]
    # start halfway between the floor and 1 on the segment from I to the optimum
    target = 0.5 * (1.0 + eig_floor)
    for i in np.flatnonzero(live & (lam < eig_floor)):
        t = (1.0 - target) / (1.0 - lam[i])
        x0 = _params_from_L(np.linalg.cholesky(I + t * D[i] - eig_floor * I))
        P[i] = _bfgs_spd(omega[i], K[i], v[i], a1, a2, x0, eig_floor)
    B = np.linalg.inv(0.5 * (P + np.swapaxes(P, -1, -2)))
    return (0.5 * (B + np.swapaxes(B, -1, -2))).reshape(batch + (n, n))


def recover_B(
    omega, mean_J, ee_vel, dt: float, weights: CalibrationWeights = CalibrationWeights(), eig_floor: float = INVERSE_EIG_FLOOR
) -> np.ndarray:
    """Single-realization form of :func:`recover_B_batch`."""
    return recover_B_batch(omega, mean_J, ee_vel, dt, weights, eig_floor)


def recover_B_samples(
    noise: NoiseEnsemble, weights: CalibrationWeights = CalibrationWeights(), step_stride: int = 1, relative: bool = True
):
    """``B`` samples for every run at every ``step_stride``-th step; shape ``(K, R, n, n)``.

    Steps with zero desired velocity carry no information about ``B`` and are
    skipped. The data-fit term is taken relative to the commanded step by
    default (see :func:`recover_B_batch`): in absolute units it is of the
    order of a joint step and balanced weights would pin every ``B`` to ``I``.
    """
    steps = [k for k in range(0, noise.M, step_stride) if np.any(noise.ee_velocities[k])]
    om = np.swapaxes(noise.omegas[:, steps], 0, 1)
    J = np.swapaxes(noise.mean_J[:, steps], 0, 1)
    return recover_B_batch(om, J, noise.ee_velocities[steps][:, None, :], noise.dt, weights, relative=relative)


def estimate_dispersion(b_samples) -> float:
    """Time-averaged dispersion ``mean_k sqrt(E||B_k - I||_F^2 / n)``.

    ``b_samples`` is indexed ``[step][sample]``; each step needs at least two
    samples.
    """
    per_step = []
    for Bk in b_samples:
        Bk = np.asarray(Bk, dtype=float)
        if Bk.ndim != 3 or Bk.shape[0] < 2:
            raise InsufficientSamples("need at least two B samples per step")
        n = Bk.shape[-1]
        dev = Bk - np.eye(n)
        per_step.append(np.sqrt(np.mean(np.sum(dev * dev, axis=(-2, -1))) / n))
    if not per_step:
        raise InsufficientSamples("no steps supplied")
    return float(np.mean(per_step))


# --------------------------------------------------------------------------
# Gaussian noise-matrix model


def moment_distance(model_q: np.ndarray, data_q: np.ndarray, weights: CalibrationWeights, relative: bool = True) -> float:
    """``sum_k b1 ||mean_model - mean_data|| + b2 |tr(Cov_model - Cov_data)|`` over steps 1..M.

    With ``relative=True`` the mean term is divided by the time average of
    ``sqrt(tr Cov_data)`` and the trace term by the time average of
    ``tr Cov_data``. Both terms are then dimensionless and of comparable
    size, so balanced weights are meaningful.
    """
    dm = np.linalg.norm(model_q.mean(axis=0) - data_q.mean(axis=0), axis=-1)[1:]
    tr_model = model_q.var(axis=0, ddof=1).sum(axis=-1)[1:] if model_q.shape[0] > 1 else 0.0
    tr_data = data_q.var(axis=0, ddof=1).sum(axis=-1)[1:] if data_q.shape[0] > 1 else np.zeros_like(dm)
    dtr = np.abs(tr_model - tr_data)
    if relative:
        scale = float(np.mean(tr_data))
        if scale > 0:
            dm = dm / float(np.mean(np.sqrt(tr_data)))
            dtr = dtr / scale
    return float(np.sum(weights.beta1 * dm + weights.beta2 * dtr))


@dataclass
class GaussianFit:
    u: float
    alpha: float
    u_margin: float
    objective: float
    jac_norm_max: float
    evaluations: list = field(default_factory=list, repr=False)


DEFAULT_MARGINS = tuple(np.geomspace(0.5, 20.0, 9))
DEFAULT_ALPHAS = tuple(np.geomspace(0.01, 1.0, 9))


def fit_gaussian_params(
    ensemble,
    task: TrajectoryTask,
    chain: ChainSpec = ChainSpec(),
    weights: CalibrationWeights = CalibrationWeights(),
    jac_norm_max: float | None = None,
    seed: int = 0,
    margins=DEFAULT_MARGINS,
    alphas=DEFAULT_ALPHAS,
    refine_rounds: int = 2,
    model_runs: int | None = None,
) -> GaussianFit:
    """Grid-plus-refine search for the inverse-Jacobian Gaussian model.

    ``u = jac_norm_max + u_margin`` where ``jac_norm_max`` is the largest
    ``||J^-1||_F`` along the nominal path. Every candidate is simulated with
    the same inner seed, so the objective surface is smooth and the argmin is
    reproducible. Candidates that hit the norm bound score ``inf``.
    """
    data = np.asarray(ensemble, dtype=float)
    runs = model_runs or data.shape[0]
    if jac_norm_max is None:
        nominal = nominal_trajectory(task, chain)
        jac_norm_max = float(np.max(np.linalg.norm(np.linalg.inv(jacobian(nominal, chain)), axis=(-2, -1))))
    evaluations = []
    cache = {}

    def score(margin, alpha):
        key = (round(float(margin), 12), round(float(alpha), 12))
        if key not in cache:
            model = GaussianNoiseMatrixModel(jac_norm_max + margin, min(alpha, 1.0), INVERSE_JACOBIAN)
            try:
                sim = simulate_model_ensemble(RngStream(seed, (0,)), model, task, chain, runs)
                val = moment_distance(sim, data, weights)
            except (NormBoundViolated, SingularDraw):
                val = np.inf
            cache[key] = val
            evaluations.append((float(margin), float(alpha), val))
        return cache[key]

    grid = [(m, a) for m in margins for a in alphas]
    best = min(grid, key=lambda p: score(*p))
    m_step = np.log(margins[1] / margins[0]) if len(margins) > 1 else 0.5
    a_step = np.log(alphas[1] / alphas[0]) if len(alphas) > 1 else 0.5
    a_floor = min(alphas)
    for _ in range(refine_rounds):
        m_step /= 2.0
        a_step /= 2.0
        cands = [
            (best[0] * np.exp(i * m_step), min(1.0, max(a_floor, best[1] * np.exp(j * a_step))))
            for i in (-1, 0, 1)
            for j in (-1, 0, 1)
        ]
        best = min(cands, key=lambda p: score(*p))
    margin, alpha = best
    return GaussianFit(
        u=float(jac_norm_max + margin),
        alpha=float(alpha),
        u_margin=float(margin),
        objective=float(score(*best)),
        jac_norm_max=float(jac_norm_max),
        evaluations=evaluations,
    )


def fit_wishart_dispersion(noise: NoiseEnsemble, weights: CalibrationWeights = CalibrationWeights(), step_stride: int = 1) -> float:
    """``sigma_B`` of the perturbation matrices recovered from every run at every ``step_stride``-th step."""
    return estimate_dispersion(recover_B_samples(noise, weights, step_stride))


@dataclass
class CalibrationResult:
    sigma_omega: np.ndarray
    sigma_B: float
    gaussian: GaussianFit
    weights: CalibrationWeights

    def models(self) -> dict:
        """The three calibrated motion models keyed by their names."""
        return {
            AdditiveGaussianModel.name: AdditiveGaussianModel(self.sigma_omega),
            MaxEntWishartModel.name: MaxEntWishartModel(self.sigma_B),
            GaussianNoiseMatrixModel.name: GaussianNoiseMatrixModel(self.gaussian.u, self.gaussian.alpha, INVERSE_JACOBIAN),
        }

    def to_dict(self) -> dict:
        return {
            "sigma_omega": self.sigma_omega.tolist(),
            "sigma_B": self.sigma_B,
            "u": self.gaussian.u,
            "alpha": self.gaussian.alpha,
            "u_margin": self.gaussian.u_margin,
            "jac_norm_max": self.gaussian.jac_norm_max,
            "gaussian_objective": self.gaussian.objective,
            "weights": {k: getattr(self.weights, k) for k in ("alpha1", "alpha2", "beta1", "beta2")},
        }


def calibrate_models(
    ensemble,
    task: TrajectoryTask,
    chain: ChainSpec = ChainSpec(),
    weights: CalibrationWeights = CalibrationWeights(),
    seed: int = 0,
    step_stride: int = 1,
) -> CalibrationResult:
    """Fit all three motion models to a measured ensemble."""
    noise = extract_process_noise(ensemble, task, chain)
    return CalibrationResult(
        sigma_omega=estimate_sigma_omega(noise),
        sigma_B=fit_wishart_dispersion(noise, weights, step_stride),
        gaussian=fit_gaussian_params(ensemble, task, chain, weights, seed=seed),
        weights=weights,
    )

"""Gaussian priors, output-misfit inversion and the relative L2 error."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .gramian import PerturbationConfig
from .model import ControlSystem
from .sim import InputSignal, SolverSpec, Trajectory, simulate_batch

__all__ = [
    "GaussianPrior",
    "PriorScaleConfig",
    "InverseProblem",
    "PosteriorEstimate",
    "network_prior",
    "scales_from_prior",
    "prior_perturbation",
    "relative_l2_error",
    "quadratic_prior_penalty",
    "invert",
]

FD_STEP = 1e-6
GTOL = 1e-6


@dataclass(frozen=True, eq=False)
class GaussianPrior:
    """Independent Gaussian prior with diagonal covariance."""

    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        var = np.broadcast_to(np.asarray(self.variance, dtype=float), mean.shape).copy()
        if np.any(var <= 0):
            raise ValueError("prior variances must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", var)

    @property
    def dim(self) -> int:
        return self.mean.size


def network_prior(n: int) -> GaussianPrior:
    """Prior on a column-major ``n x n`` network matrix: ``N(-1, 1)`` on the
    diagonal and ``N(0, 1)`` elsewhere."""
    return GaussianPrior(-np.eye(n).reshape(-1, order="F"), np.ones(n * n))


@dataclass(frozen=True)
class PriorScaleConfig:
    a_seq: tuple = (1.0,)

    def __post_init__(self):
        a = tuple(float(v) for v in self.a_seq)
        if not a:
            raise ValueError("a_seq must be nonempty")
        if any(not 0.0 < v <= 1.0 for v in a):
            raise ValueError("every a_i must lie in (0, 1]")
        object.__setattr__(self, "a_seq", a)


def scales_from_prior(prior: GaussianPrior, a_seq=(1.0,)) -> np.ndarray:
    """Parameter perturbation scales ``a_i * sqrt(variance_j)``.

    Returns an array of shape ``(len(a_seq), p)``; row ``i`` is one scale
    set across all parameters.
    """
    a = np.asarray(PriorScaleConfig(tuple(np.atleast_1d(a_seq))).a_seq)
    return a[:, None] * np.sqrt(prior.variance)[None, :]


def prior_perturbation(prior: GaussianPrior, a_seq=(1.0,), base: PerturbationConfig | None = None,
                       excitation: InputSignal | None = None) -> PerturbationConfig:
    """Perturbation configuration whose parameter scales follow the prior.

    Gramians built with it should be evaluated at ``theta = prior.mean``,
    which places the parameter steady states at the prior mean.
    """
    base = base or PerturbationConfig()
    return PerturbationConfig(
        input_scales=base.input_scales,
        state_scales=base.state_scales,
        input_rotations=base.input_rotations,
        state_rotations=base.state_rotations,
        input_kind=base.input_kind,
        param_scales=scales_from_prior(prior, a_seq),
        excitation=excitation if excitation is not None else base.excitation,
    )


def _as_array(y):
    return np.asarray(y.snapshots if isinstance(y, Trajectory) else y, dtype=float)


def relative_l2_error(y, y_tilde) -> float:
    """``||y - y_tilde|| / ||y||`` with the norm ``sqrt(sum_t |y(t)|^2)``."""
    y, yt = _as_array(y), _as_array(y_tilde)
    if y.shape != yt.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {yt.shape}")
    ny = np.linalg.norm(y)
    if ny == 0:
        raise ValueError("relative error is undefined for a zero reference")
    return float(np.linalg.norm(y - yt) / ny)


def quadratic_prior_penalty(theta, prior: GaussianPrior, weight: float = 0.0) -> float:
    """``weight * sum_j (theta_j - mu_j)**2 / variance_j``."""
    if weight < 0:
        raise ValueError("weight must be nonnegative")
    if weight == 0:
        return 0.0
    d = np.asarray(theta, dtype=float) - prior.mean
    return float(weight * np.sum(d * d / prior.variance))


@dataclass(eq=False)
class InverseProblem:
    """Fit parameters of ``model`` to observed outputs.

    ``budget`` counts parameter points at which the model is simulated,
    finite-difference points included; the default is ``200`` per free
    parameter.
    """

    model: ControlSystem
    data: Trajectory
    prior: GaussianPrior
    input: InputSignal | None
    spec: SolverSpec
    budget: int | None = None
    x0: np.ndarray | None = None
    penalty_weight: float = 0.0

    def __post_init__(self):
        if len(self.data.times) != self.spec.steps + 1 or not np.allclose(self.data.times, self.spec.times):
            raise ValueError("data grid does not match the solver grid")
        if self.prior.dim != self.model.p:
            raise ValueError("prior dimension differs from the parameter dimension")
        if self.x0 is None:
            self.x0 = self.model.x_bar.copy()


@dataclass(eq=False)
class PosteriorEstimate:
    theta_hat: np.ndarray
    misfit: float
    evals: int
    wall_time: float
    converged: bool
    output: Trajectory | None = None
    reduced_theta: np.ndarray | None = None
    message: str = ""
    extra: dict = field(default_factory=dict)


class _BudgetExhausted(Exception):
    pass


class _Objective:
    """Squared output misfit with batched forward-difference gradients."""

    def __init__(self, system, to_theta, x0, u_seq, data, spec, budget, penalty):
        self.system = system
        self.to_theta = to_theta
        self.x0 = x0
        self.u_seq = u_seq
        self.data = data
        self.spec = spec
        self.budget = budget
        self.penalty = penalty
        self.evals = 0
        self.best = (np.inf, None)
        self._cache = None
        # misfits below this are rounding noise of the batched simulation
        self.floor = (64 * np.finfo(float).eps * np.linalg.norm(data)) ** 2

    def _misfits(self, Z):
        if self.evals + len(Z) > self.budget:
            raise _BudgetExhausted
        self.evals += len(Z)
        thetas = self.to_theta(Z)
        x0 = np.tile(self.x0, (len(Z), 1))
        Y = simulate_batch(self.system, x0, thetas, self.u_seq, self.spec, nonfinite="nan")
        with np.errstate(over="ignore", invalid="ignore"):
            J = np.sum((Y - self.data) ** 2, axis=(1, 2))
        J = J + np.array([self.penalty(th) for th in thetas])
        J[~np.isfinite(J)] = np.inf
        k = int(np.argmin(J))
        if J[k] < self.best[0]:
            self.best = (float(J[k]), Z[k].copy())
        return J

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        if self._cache is not None and np.array_equal(self._cache[0], z):
            return self._cache[1]
        h = FD_STEP * np.maximum(1.0, np.abs(z))
        Z = np.vstack([z, z + np.diag(h)])
        J = self._misfits(Z)
        if not np.isfinite(J[0]):
            out = (np.inf, np.zeros_like(z))
        elif J[0] <= self.floor:
            # an exact fit is a global minimum of the sum of squares
            out = (float(J[0]), np.zeros_like(z))
        else:
            g = (J[1:] - J[0]) / h
            g[~np.isfinite(g)] = 0.0
            out = (float(J[0]), g)
        self._cache = (z.copy(), out)
        return out


def invert(problem: InverseProblem, reduction=None, method: str = "BFGS") -> PosteriorEstimate:
    """Minimize the squared output misfit by quasi-Newton iterations.

    Parameters
    ----------
    problem : InverseProblem
    reduction : ReducedModel, optional
        A reduced model with a parameter projection. The search then runs
        over the reduced parameters, started from the projected prior mean,
        and ``theta_hat`` is lifted back with ``Pi1``. Without it the search
        runs over the free parameters of ``problem.model`` (the upper
        triangle for the network models), started from the prior mean.

    Returns
    -------
    PosteriorEstimate
        The budget, once exhausted, ends the search and the best point seen
        is returned with ``converged=False``.
    """
    prior, spec = problem.prior, problem.spec
    if reduction is None:
        system = problem.model
        z0 = system.free(prior.mean)
        to_theta = system.expand
        lift = system.expand
        x0 = problem.x0
    else:
        if reduction.param_proj is None:
            raise ValueError("reduction carries no parameter projection")
        system = reduction.system
        z0 = reduction.restrict_params(prior.mean)
        to_theta = np.asarray  # the reduced system lifts its own parameters
        lift = reduction.lift_params
        x0 = reduction.restrict_state(problem.x0)
    n_free = z0.size
    budget = problem.budget if problem.budget is not None else 200 * max(n_free, 1)
    if budget < n_free + 1:
        raise ValueError("budget does not cover one gradient evaluation")

    steps = spec.steps
    if problem.input is None:
        u_seq = np.tile(system.u_bar, (steps, 1))
    else:
        u_seq = problem.input.sample(steps, spec.dt)
    weight = problem.penalty_weight
    penalty = (lambda th: quadratic_prior_penalty(lift(th) if reduction is not None else th, prior, weight)) \
        if weight > 0 else (lambda th: 0.0)
    obj = _Objective(system, to_theta, x0, u_seq, problem.data.snapshots, spec, budget, penalty)

    start = time.perf_counter()
    converged, message = False, ""
    try:
        res = minimize(obj, z0, jac=True, method=method,
                       options={"gtol": GTOL, "maxiter": budget})
        converged, message = bool(res.success), str(res.message)
    except _BudgetExhausted:
        message = "evaluation budget exhausted"
    wall = time.perf_counter() - start

    misfit, z_best = obj.best
    if z_best is None:
        z_best = z0
    if not np.isfinite(misfit):
        converged = False
        message = message or "objective is not finite"
    theta_hat = np.asarray(lift(z_best), dtype=float)
    y = simulate_batch(system, x0[None, :], to_theta(z_best[None, :]), u_seq, spec, nonfinite="nan")[0]
    return PosteriorEstimate(
        theta_hat=theta_hat, misfit=float(misfit), evals=obj.evals, wall_time=wall,
        converged=converged, output=Trajectory(spec.times, y),
        reduced_theta=z_best if reduction is not None else None, message=message,
    )

"""Fixed-step explicit Runge-Kutta integration of control systems."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .model import ControlSystem

__all__ = [
    "SolverSpec",
    "InputSignal",
    "Trajectory",
    "SimulationError",
    "simulate_batch",
    "integrate",
    "make_truth_data",
]

METHODS = ("rk1", "rk2", "rk4")


class SimulationError(RuntimeError):
    """Raised when a trajectory leaves the finite reals."""

    def __init__(self, message, index=None, step=None):
        super().__init__(message)
        self.index = index
        self.step = step


@dataclass(frozen=True)
class SolverSpec:
    dt: float = 0.01
    T: float = 1.0
    method: str = "rk4"
    substeps_for_truth: int = 10

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.T < self.dt:
            raise ValueError("horizon T must be at least one step")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.substeps_for_truth < 1:
            raise ValueError("substeps_for_truth must be >= 1")

    @property
    def steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.steps + 1)


@dataclass(frozen=True, eq=False)
class InputSignal:
    """Impulse or step input ``baseline + scale * direction``.

    An impulse is realized as a rectangle of height ``scale / width`` on
    ``[0, width)``; ``width`` defaults to the solver step.
    """

    kind: str
    direction: np.ndarray
    scale: float = 1.0
    baseline: np.ndarray | None = None
    width: float | None = None

    def __post_init__(self):
        if self.kind not in ("impulse", "step"):
            raise ValueError(f"unknown input kind {self.kind!r}")
        d = np.asarray(self.direction, dtype=float).reshape(-1)
        if abs(np.linalg.norm(d) - 1.0) > 1e-12:
            raise ValueError("direction must have unit norm")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "direction", d)
        base = np.zeros_like(d) if self.baseline is None else np.asarray(self.baseline, dtype=float)
        object.__setattr__(self, "baseline", base.reshape(d.shape))

    def sample(self, steps: int, dt: float, width: float | None = None) -> np.ndarray:
        """Piecewise-constant values on ``steps`` intervals of length ``dt``."""
        width = self.width or width or dt
        u = np.tile(self.baseline, (steps, 1))
        if self.kind == "step":
            u += self.scale * self.direction
        else:
            k = max(1, int(round(width / dt)))
            u[:k] += (self.scale / width) * self.direction
        return u


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    snapshots: np.ndarray

    def __post_init__(self):
        if len(self.times) != len(self.snapshots):
            raise ValueError("times and snapshots disagree in length")

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    def to_csv(self, path, names=None):
        d = self.snapshots.shape[1]
        names = names or [f"c{k}" for k in range(d)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", *names])
            for t, row in zip(self.times, self.snapshots):
                w.writerow([repr(float(t)), *(repr(float(v)) for v in row)])

    @classmethod
    def from_csv(cls, path):
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0], data[:, 1:])


def _step(f, x, u, theta, h, method):
    k1 = f(x, u, theta)
    if method == "rk1":
        return x + h * k1
    if method == "rk2":
        k2 = f(x + 0.5 * h * k1, u, theta)
        return x + h * k2
    k2 = f(x + 0.5 * h * k1, u, theta)
    k3 = f(x + 0.5 * h * k2, u, theta)
    k4 = f(x + h * k3, u, theta)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _run(f, g, x, u_seq, theta, h, steps, method, observe, stride, nonfinite):
    """Integrate one (possibly batched) state; ``u_seq[k]`` holds on step k."""
    first = x if observe == "states" else g(x, u_seq[0], theta)
    out = np.empty((steps // stride + 1,) + np.shape(first))
    out[0] = first
    for k in range(steps):
        x = _step(f, x, u_seq[k], theta, h, method)
        if not np.all(np.isfinite(x)):
            if nonfinite == "raise":
                bad = np.argwhere(~np.isfinite(np.reshape(x, (-1, np.shape(x)[-1])))).tolist()
                raise SimulationError(
                    f"non-finite state at step {k + 1}", index=bad[0][0] if bad else None, step=k + 1
                )
        if (k + 1) % stride == 0:
            j = (k + 1) // stride
            uk = u_seq[min(k + 1, steps - 1)]
            out[j] = x if observe == "states" else g(x, uk, theta)
    return out


def simulate_batch(system: ControlSystem, x0, theta, u_seq, spec: SolverSpec,
                   observe: str = "outputs", refine: int = 1, nonfinite: str = "raise"):
    """Integrate a batch of simulations.

    Parameters
    ----------
    x0 : (B, n) array
    theta : (B, p) or (p,) array
    u_seq : (steps, B, m) or (steps, m) array
        Input values held on each solver step (already at the refined
        resolution when ``refine > 1``).
    refine : int
        Sub-steps per ``spec.dt``; results are recorded on the coarse grid.
    nonfinite : {"raise", "nan"}
        Raise :class:`SimulationError` on blow-up, or let NaN/inf through.

    Returns
    -------
    (B, steps + 1, d) array of states or outputs.
    """
    if observe not in ("states", "outputs"):
        raise ValueError("observe must be 'states' or 'outputs'")
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    nb = x0.shape[0]
    if x0.shape[1] != system.n:
        raise ValueError(f"initial state has dimension {x0.shape[1]}, expected {system.n}")
    theta = np.asarray(theta, dtype=float)
    if theta.shape[-1] != system.p:
        raise ValueError(f"parameter has dimension {theta.shape[-1]}, expected {system.p}")
    u_seq = np.asarray(u_seq, dtype=float)
    steps = spec.steps * refine
    if u_seq.shape[0] != steps or u_seq.shape[-1] != system.m:
        raise ValueError(f"input sequence has shape {u_seq.shape}, expected ({steps}, ..., {system.m})")
    h = spec.dt / refine

    base = system.meta.get("base") if isinstance(system.meta, dict) else None
    if base is not None and system.meta.get("n_base") == base.n and base.vectorized:
        # Parameter-states of an augmented system never move, so integrating
        # the base system with one parameter vector per sample is exact.
        nb_, p_ = base.n, base.p
        xb = simulate_batch(base, x0[:, :nb_], x0[:, nb_:], u_seq, spec, observe=observe,
                            refine=refine, nonfinite=nonfinite)
        if observe == "outputs":
            return xb
        params = np.broadcast_to(x0[:, None, nb_:], xb.shape[:2] + (p_,))
        return np.concatenate([xb, params], axis=-1)

    with np.errstate(over="ignore", invalid="ignore"):
        if system.vectorized:
            if u_seq.ndim == 2:
                u_seq = np.broadcast_to(u_seq[:, None, :], (steps, nb, system.m))
            th = theta if theta.ndim == 2 else np.broadcast_to(theta, (nb, system.p))
            out = _run(system.f, system.g, x0, u_seq, th, h, steps, spec.method,
                       observe, refine, nonfinite)
            return np.moveaxis(out, 0, 1)
        res = []
        for b in range(nb):
            ub = u_seq if u_seq.ndim == 2 else u_seq[:, b, :]
            tb = theta if theta.ndim == 1 else theta[b]
            try:
                res.append(_run(system.f, system.g, x0[b], ub, tb, h, steps, spec.method,
                                observe, refine, nonfinite))
            except SimulationError as err:
                raise SimulationError(str(err), index=b, step=err.step) from None
        return np.stack(res)


def integrate(system: ControlSystem, u: InputSignal | None, x0, theta, spec: SolverSpec,
              observe: str = "outputs", refine: int = 1) -> Trajectory:
    """Simulate one trajectory and sample it on the ``spec.dt`` grid."""
    steps = spec.steps * refine
    if u is None:
        u_seq = np.tile(system.u_bar, (steps, 1))
    else:
        if u.direction.shape != (system.m,):
            raise ValueError("input direction has wrong dimension")
        u_seq = u.sample(steps, spec.dt / refine, width=spec.dt)
    theta = system.theta if theta is None else theta
    snaps = simulate_batch(system, np.asarray(x0, dtype=float)[None, :], theta, u_seq, spec,
                           observe=observe, refine=refine)[0]
    return Trajectory(spec.times, snaps)


def make_truth_data(system: ControlSystem, u: InputSignal | None, x0, true_theta,
                    spec: SolverSpec) -> Trajectory:
    """Output trajectory from rk4 at ``dt / substeps_for_truth``, subsampled
    back onto the ``dt`` grid (avoids fitting a model to its own solver)."""
    fine = SolverSpec(dt=spec.dt, T=spec.T, method="rk4", substeps_for_truth=spec.substeps_for_truth)
    return integrate(system, u, x0, true_theta, fine, observe="outputs",
                     refine=spec.substeps_for_truth)

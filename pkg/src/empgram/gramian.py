"""Empirical gramians from perturbed simulations, plus dense oracles.

All empirical gramians share one layout: a batch of sub-simulations is
integrated in a fixed, index-lexicographic order and the sub-gramians are
accumulated in that same order, so results are bit-reproducible.

The cross gramian is stored with rows indexing state components (from the
input-driven trajectories) and columns indexing the initial-state
perturbation directions. Under this layout a linear system reproduces
``int exp(A t) B C exp(A t) dt`` and the joint gramian of an augmented
system has vanishing parameter rows.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as spla

from .model import ControlSystem, augment
from .sim import InputSignal, SimulationError, SolverSpec, simulate_batch

__all__ = [
    "PerturbationConfig",
    "Gramian",
    "empirical_controllability",
    "empirical_observability",
    "empirical_cross",
    "empirical_sensitivity",
    "empirical_identifiability",
    "empirical_joint",
    "lyapunov_oracle",
    "sylvester_oracle",
    "trace_gain_check",
    "finite_horizon_gramian",
]

log = logging.getLogger(__name__)

KINDS = ("W_C", "W_O", "W_X", "W_S", "W_I", "W_Idd", "W_J")
ORTHO_TOL = 1e-12
DIAG_GUARD = 1e-12


def _checked_rotations(mats, dim, what):
    if mats is None:
        return [np.eye(dim)]
    out = []
    for S in mats:
        S = np.asarray(S, dtype=float)
        if S.shape != (dim, dim):
            raise ValueError(f"{what} rotation has shape {S.shape}, expected ({dim}, {dim})")
        if np.linalg.norm(S.T @ S - np.eye(dim)) > ORTHO_TOL:
            raise ValueError(f"{what} rotation is not orthogonal")
        out.append(S)
    if not out:
        raise ValueError(f"{what} rotation set is empty")
    return out


@dataclass(frozen=True, eq=False)
class PerturbationConfig:
    """Perturbation sets for empirical gramians.

    Parameters
    ----------
    input_scales : sequence of float
        Input scales ``c_h``.
    state_scales : sequence of float or (K, n) array
        Initial-state scales ``d_k``; a matrix gives one scale per
        direction and scale set.
    input_rotations, state_rotations : sequence of arrays, optional
        Orthogonal transformations of the standard directions; identity by
        default.
    input_kind : {"impulse", "step"}
        Shape of the input perturbations.
    param_scales : (K, p) array, optional
        Scale sets for parameter perturbations (sensitivity gramian) and
        parameter-states (identifiability and joint gramians). Defaults to
        ``input_scales`` for the former and ``state_scales`` for the latter.
    excitation : InputSignal, optional
        Input applied during initial-state and parameter sub-simulations.
        Differences are then taken against the unperturbed trajectory under
        the same input. Without it the reference is the steady state.
    """

    input_scales: Sequence[float] = (1.0,)
    state_scales: Sequence[float] | np.ndarray = (1.0,)
    input_rotations: Sequence[np.ndarray] | None = None
    state_rotations: Sequence[np.ndarray] | None = None
    input_kind: str = "impulse"
    param_scales: np.ndarray | None = None
    excitation: InputSignal | None = None

    def __post_init__(self):
        cu = np.asarray(self.input_scales, dtype=float).reshape(-1)
        dx = np.asarray(self.state_scales, dtype=float)
        if cu.size == 0 or dx.size == 0:
            raise ValueError("scale sets must be nonempty")
        if np.any(cu <= 0) or np.any(dx <= 0):
            raise ValueError("scales must be positive")
        if self.input_kind not in ("impulse", "step"):
            raise ValueError(f"unknown input kind {self.input_kind!r}")
        if self.param_scales is not None:
            ps = np.atleast_2d(np.asarray(self.param_scales, dtype=float))
            if np.any(ps <= 0):
                raise ValueError("parameter scales must be positive")
            object.__setattr__(self, "param_scales", ps)
        object.__setattr__(self, "input_scales", tuple(cu))

    def input_rot(self, m):
        return _checked_rotations(self.input_rotations, m, "input")

    def state_rot(self, n):
        return _checked_rotations(self.state_rotations, n, "state")

    def state_scale_matrix(self, n):
        d = np.asarray(self.state_scales, dtype=float)
        if d.ndim == 1:
            return np.repeat(d[:, None], n, axis=1)
        if d.shape[1] != n:
            raise ValueError(f"state scale matrix has {d.shape[1]} columns, expected {n}")
        return d

    def parameter_scale_matrix(self, p, fallback):
        if self.param_scales is not None:
            if self.param_scales.shape[1] != p:
                raise ValueError("parameter scale matrix has wrong width")
            return self.param_scales
        d = np.asarray(fallback, dtype=float).reshape(-1)
        return np.repeat(d[:, None], p, axis=1)

    def for_augmented(self, n, p):
        """Lift the configuration onto the ``(n + p)``-state augmented system."""
        ds = self.state_scale_matrix(n)
        dp = self.parameter_scale_matrix(p, np.asarray(self.state_scales).reshape(-1)
                                         if np.ndim(self.state_scales) == 1 else ds[:, 0])
        if ds.shape[0] != dp.shape[0]:
            if ds.shape[0] == 1:
                ds = np.repeat(ds, dp.shape[0], axis=0)
            elif dp.shape[0] == 1:
                dp = np.repeat(dp, ds.shape[0], axis=0)
            else:
                raise ValueError("state and parameter scale sets differ in count")
        rots = None
        if self.state_rotations is not None:
            rots = [spla.block_diag(T, np.eye(p)) if np.shape(T) == (n, n) else T
                    for T in self.state_rotations]
        return PerturbationConfig(
            input_scales=self.input_scales,
            state_scales=np.hstack([ds, dp]),
            input_rotations=self.input_rotations,
            state_rotations=rots,
            input_kind=self.input_kind,
            excitation=self.excitation,
        )


@dataclass(eq=False)
class Gramian:
    kind: str
    matrix: np.ndarray
    n_simulations: int = 0
    notes: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown gramian kind {self.kind!r}")
        self.matrix = np.asarray(self.matrix, dtype=float)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise ValueError("gramian must be a square matrix")

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def check_psd(self, rtol: float = 1e-8) -> None:
        """Raise unless the matrix is symmetric positive semi-definite."""
        W = self.matrix
        if W.size == 0:
            return
        scale = max(np.linalg.norm(W, 2), np.finfo(float).tiny)
        if np.linalg.norm(W - W.T) > rtol * scale * W.shape[0]:
            raise ValueError(f"{self.kind} is not symmetric")
        lam = np.linalg.eigvalsh(0.5 * (W + W.T))
        if lam[0] < -rtol * scale:
            raise ValueError(f"{self.kind} has eigenvalue {lam[0]:.3e} < 0")

    def to_csv(self, path):
        np.savetxt(path, self.matrix, delimiter=",", fmt="%.17g")


def _excitation_seq(system, pert, spec):
    steps = spec.steps
    if pert.excitation is None:
        return np.tile(system.u_bar, (steps, 1))
    return pert.excitation.sample(steps, spec.dt)


def _simulate(system, x0, theta, u_seq, spec, observe, what, labels):
    try:
        return simulate_batch(system, x0, theta, u_seq, spec, observe=observe)
    except SimulationError as err:
        label = labels[err.index] if err.index is not None and err.index < len(labels) else None
        raise SimulationError(f"{what} sub-simulation {label} failed: {err}",
                              index=label, step=err.step) from err


def _controllability_snapshots(system, pert, spec, theta):
    """States from the input perturbations, ordered (h, i, j).

    Returns ``(X, scales, labels)`` with ``X`` of shape
    ``(H, I, m, steps + 1, n)`` holding ``x - x_bar``.
    """
    m, steps = system.m, spec.steps
    rots = pert.input_rot(m)
    labels, u_all, scales = [], [], []
    for h, c in enumerate(pert.input_scales):
        for i, S in enumerate(rots):
            for j in range(m):
                sig = InputSignal(pert.input_kind, S[:, j], c, system.u_bar)
                u_all.append(sig.sample(steps, spec.dt))
                labels.append((h, i, j))
                scales.append(c)
    u_seq = np.stack(u_all, axis=1)
    x0 = np.tile(system.x_bar, (len(labels), 1))
    X = _simulate(system, x0, theta, u_seq, spec, "states", "controllability", labels)
    X = X - system.x_bar
    shape = (len(pert.input_scales), len(rots), m) + X.shape[1:]
    return X.reshape(shape), np.asarray(pert.input_scales), rots, len(labels)


def _observability_snapshots(system, pert, spec, theta):
    """Outputs from the initial-state perturbations, ordered (k, l, a).

    Returns ``Z`` of shape ``(K, L, n, steps + 1, o)`` holding
    ``(y - y_ref) / d_ka``, the rotations, and the simulation count.
    """
    n = system.n
    rots = pert.state_rot(n)
    dmat = pert.state_scale_matrix(n)
    labels, x0s, dvals = [], [], []
    for k in range(dmat.shape[0]):
        for l, T in enumerate(rots):
            for a in range(n):
                x0s.append(system.x_bar + dmat[k, a] * T[:, a])
                labels.append((k, l, a))
                dvals.append(dmat[k, a])
    u_seq = _excitation_seq(system, pert, spec)
    count = len(labels)
    if pert.excitation is None:
        y_ref = system.y_bar
    else:
        y_ref = _simulate(system, system.x_bar[None, :], theta, u_seq, spec,
                          "outputs", "reference", ["ref"])[0]
        count += 1
    Y = _simulate(system, np.array(x0s), theta, u_seq, spec, "outputs", "observability", labels)
    Z = (Y - y_ref) / np.asarray(dvals)[:, None, None]
    return Z.reshape((dmat.shape[0], len(rots), n) + Z.shape[1:]), rots, count


def empirical_controllability(system: ControlSystem, pert: PerturbationConfig,
                              spec: SolverSpec, theta=None) -> Gramian:
    """Empirical controllability gramian ``W_C`` (n x n).

    Averages ``dt * sum_t dx dx^T / c_h**2`` over input scales and
    rotations, summed over the ``m`` input directions.
    """
    theta = system.theta if theta is None else theta
    X, c, rots, count = _controllability_snapshots(system, pert, spec, theta)
    H, I = X.shape[:2]
    W = np.zeros((system.n, system.n))
    for h in range(H):
        for i in range(I):
            Xs = (X[h, i] / c[h]).reshape(-1, system.n)
            W += spec.dt * (Xs.T @ Xs)
    return Gramian("W_C", W / (H * I), n_simulations=count)


def empirical_observability(system: ControlSystem, pert: PerturbationConfig,
                            spec: SolverSpec, theta=None) -> Gramian:
    """Empirical observability gramian ``W_O`` over all ``system.n`` states."""
    theta = system.theta if theta is None else theta
    Z, rots, count = _observability_snapshots(system, pert, spec, theta)
    K, L, n = Z.shape[:3]
    W = np.zeros((n, n))
    for k in range(K):
        for l, T in enumerate(rots):
            Zm = Z[k, l].reshape(n, -1)
            W += T @ (spec.dt * (Zm @ Zm.T)) @ T.T
    return Gramian("W_O", W / (K * L), n_simulations=count)


def empirical_cross(system: ControlSystem, pert: PerturbationConfig,
                    spec: SolverSpec, theta=None) -> Gramian:
    """Empirical cross gramian ``W_X`` of a square system.

    Each input-driven trajectory ``dx^{hij}`` is paired with component
    ``j`` (in the rotated input frame ``S_i``) of every initial-state
    response ``dy^{kla}``, weighted by ``1 / (c_h d_k)``.
    """
    if system.m != system.o:
        raise ValueError(f"cross gramian needs a square system, got m={system.m}, o={system.o}")
    theta = system.theta if theta is None else theta
    X, c, srots, n_ctrl = _controllability_snapshots(system, pert, spec, theta)
    Z, trots, n_obs = _observability_snapshots(system, pert, spec, theta)
    H, I, m, nt, n = X.shape
    K, L = Z.shape[:2]
    W = np.zeros((n, n))
    for h in range(H):
        for i, S in enumerate(srots):
            Xh = X[h, i] / c[h]                                  # (j, t, b)
            for k in range(K):
                for l, T in enumerate(trots):
                    Xr = (Xh @ T).transpose(2, 1, 0).reshape(n, nt * m)   # (b, t j)
                    Yr = (Z[k, l] @ S).reshape(n, nt * m)                 # (a, t j)
                    W += T @ (spec.dt * (Xr @ Yr.T)) @ T.T
    return Gramian("W_X", W / (H * I * K * L), n_simulations=n_ctrl + n_obs)


def empirical_sensitivity(system: ControlSystem, pert: PerturbationConfig,
                          spec: SolverSpec, theta=None):
    """Sensitivity gramian ``W_S`` and the total controllability gramian.

    Each parameter is treated as an extra input channel: ``theta_k`` is
    offset by each of its scales for the whole horizon and the state
    deviation from the unperturbed trajectory gives ``W_C,k``. Returns
    ``(W_S, W_C)`` with ``W_S = diag(tr W_C,k)`` and
    ``W_C = W_C,0 + sum_k W_C,k``.
    """
    if not system.partitionable:
        raise ValueError("sensitivity gramian needs an additively partitioned vector field")
    theta = system.theta if theta is None else np.asarray(theta, dtype=float)
    wc0 = empirical_controllability(system, pert, spec, theta)
    n, p = system.n, system.p
    cmat = pert.parameter_scale_matrix(p, pert.input_scales)
    u_seq = _excitation_seq(system, pert, spec)
    count = wc0.n_simulations
    if pert.excitation is None:
        x_ref = system.x_bar
    else:
        x_ref = _simulate(system, system.x_bar[None, :], theta, u_seq, spec,
                          "states", "reference", ["ref"])[0]
        count += 1

    thetas, labels, cvals = [], [], []
    for s in range(cmat.shape[0]):
        for k in range(p):
            th = theta.copy()
            th[k] += cmat[s, k]
            thetas.append(th)
            labels.append((s, k))
            cvals.append(cmat[s, k])
    traces = np.zeros(p)
    W = np.zeros((n, n))
    if p:
        x0 = np.tile(system.x_bar, (len(labels), 1))
        X = _simulate(system, x0, np.array(thetas), u_seq, spec, "states", "sensitivity", labels)
        count += len(labels)
        Xs = np.subtract(X, x_ref, out=X)
        Xs /= np.asarray(cvals)[:, None, None]
        per_sim = spec.dt * np.einsum("btn,btn->b", Xs, Xs)
        traces = per_sim.reshape(cmat.shape[0], p).sum(axis=0) / cmat.shape[0]
        Xm = Xs.reshape(-1, n)
        W = spec.dt * (Xm.T @ Xm) / cmat.shape[0]
    ws = Gramian("W_S", np.diag(traces), n_simulations=count)
    wc = Gramian("W_C", wc0.matrix + W, n_simulations=count)
    return ws, wc


def empirical_identifiability(system: ControlSystem, pert: PerturbationConfig,
                              spec: SolverSpec, theta=None, mode: str = "schur"):
    """Identifiability gramian from the augmented observability gramian.

    The observability gramian of the parameter-augmented system is split
    into ``[[W_O, W_M], [W_M^T, W_P]]``. ``mode="schur"`` returns
    ``W_P - W_M^T W_O^{-1} W_M``, ``mode="approx"`` returns ``W_P``.
    The state block ``W_O`` is returned as well.
    """
    if mode not in ("schur", "approx"):
        raise ValueError(f"unknown mode {mode!r}")
    theta = system.theta if theta is None else np.asarray(theta, dtype=float)
    n, p = system.n, system.p
    aug = augment(system, theta)
    wo_aug = empirical_observability(aug, pert.for_augmented(n, p), spec)
    Wf = wo_aug.matrix
    W_O, W_M, W_P = Wf[:n, :n], Wf[:n, n:], Wf[n:, n:]
    notes = []
    if mode == "approx":
        W_I = W_P.copy()
    else:
        W_I = W_P - W_M.T @ _solve_psd(W_O, W_M, notes)
        W_I = 0.5 * (W_I + W_I.T)
    wi = Gramian("W_I", W_I, n_simulations=wo_aug.n_simulations, notes=notes)
    wo = Gramian("W_O", W_O, n_simulations=wo_aug.n_simulations)
    return wi, wo


def _solve_psd(W, R, notes, rcond=1e-12):
    s = np.linalg.svd(W, compute_uv=False) if W.size else np.zeros(0)
    if W.size == 0:
        return R
    if s[-1] <= rcond * s[0]:
        msg = "observability block is singular; using the pseudo-inverse"
        notes.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=3)
        return np.linalg.pinv(W, rcond=rcond) @ R
    return np.linalg.solve(W, R)


def empirical_joint(system: ControlSystem, pert: PerturbationConfig,
                    spec: SolverSpec, theta=None, full: bool = False):
    """Joint gramian: the cross gramian of the parameter-augmented system.

    Returns ``(W_X, W_Idd)`` where ``W_X`` is the upper-left state block and
    ``W_Idd = W_M^T diag(sym(W_X))^{-1} W_M`` the cross-identifiability
    gramian built from the mixture block ``W_M``. With ``full=True`` the
    whole joint gramian is appended to the tuple.
    """
    if system.m != system.o:
        raise ValueError("joint gramian needs a square system")
    theta = system.theta if theta is None else np.asarray(theta, dtype=float)
    n, p = system.n, system.p
    aug = augment(system, theta)
    pa = pert.for_augmented(n, p) if p else pert
    wj = empirical_cross(aug, pa, spec)
    WJ = wj.matrix
    W_X = WJ[:n, :n]
    W_M = WJ[:n, n:]
    d = np.diag(0.5 * (W_X + W_X.T)).copy()
    notes = []
    small = np.abs(d) < DIAG_GUARD
    if np.any(small):
        d[small] = np.where(d[small] < 0, -DIAG_GUARD, DIAG_GUARD)
        msg = f"{int(small.sum())} near-zero diagonal entries of the cross gramian guarded"
        notes.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    W_Idd = W_M.T @ (W_M / d[:, None])
    out = (Gramian("W_X", W_X, n_simulations=wj.n_simulations),
           Gramian("W_Idd", 0.5 * (W_Idd + W_Idd.T), n_simulations=wj.n_simulations, notes=notes))
    if full:
        return out + (Gramian("W_J", WJ, n_simulations=wj.n_simulations),)
    return out


# --- dense oracles ---------------------------------------------------------

def _require_hurwitz(A):
    lam = np.linalg.eigvals(A)
    if np.max(lam.real) >= 0:
        raise np.linalg.LinAlgError("matrix is not Hurwitz; Kronecker system is singular or indefinite")


def lyapunov_oracle(A, Q):
    """Solve ``A W + W A^T = -Q`` by dense Kronecker vectorization."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    n = A.shape[0]
    if n > 64:
        raise ValueError("dense Kronecker solve is limited to n <= 64")
    _require_hurwitz(A)
    I = np.eye(n)
    K = np.kron(I, A) + np.kron(A, I)
    w = np.linalg.solve(K, -Q.reshape(-1, order="F"))
    return w.reshape(n, n, order="F")


def sylvester_oracle(A, B, C):
    """Solve ``A W + W A = -B C`` by dense Kronecker vectorization."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    n = A.shape[0]
    if n > 64:
        raise ValueError("dense Kronecker solve is limited to n <= 64")
    _require_hurwitz(A)
    I = np.eye(n)
    K = np.kron(I, A) + np.kron(A.T, I)
    w = np.linalg.solve(K, -(B @ C).reshape(-1, order="F"))
    return w.reshape(n, n, order="F")


def trace_gain_check(A, B, C):
    """Return ``(tr W_X, -tr(C A^{-1} B) / 2)``; equal for stable square systems."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    lhs = float(np.trace(sylvester_oracle(A, B, C)))
    rhs = float(-0.5 * np.trace(C @ np.linalg.solve(A, B)))
    return lhs, rhs


def finite_horizon_gramian(A1, Q, A2, T):
    """``int_0^T exp(A1 t) Q exp(A2 t) dt`` by a block exponential and doubling.

    Covers finite-horizon controllability (``A, BB^T, A^T``), observability
    (``A^T, C^T C, A``) and cross (``A, BC, A``) gramians, and does not need
    the system to be stable. The block exponential is taken on a short
    interval ``h = T / 2**k`` with ``h * max(|A1|, |A2|) <= 1`` and the
    horizon is doubled with ``W(2h) = W(h) + exp(A1 h) W(h) exp(A2 h)``,
    which avoids the growth of ``exp(-A2 T)`` for long horizons.
    """
    A1, Q, A2 = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A1, Q, A2))
    n1, n2 = A1.shape[0], A2.shape[0]
    norm = max(np.linalg.norm(A1, 1), np.linalg.norm(A2, 1), 1e-300)
    k = max(0, int(np.ceil(np.log2(max(T * norm, 1.0)))))
    h = T / 2**k
    M = np.zeros((n1 + n2, n1 + n2))
    M[:n1, :n1] = A1
    M[:n1, n1:] = Q
    M[n1:, n1:] = -A2
    E = spla.expm(M * h)
    E1 = E[:n1, :n1]
    E2 = spla.expm(A2 * h)
    W = E[:n1, n1:] @ E2
    for _ in range(k):
        W = W + E1 @ W @ E2
        E1 = E1 @ E1
        E2 = E2 @ E2
    return W

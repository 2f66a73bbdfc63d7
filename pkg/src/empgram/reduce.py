"""Projections from gramians and the reduced models built from them."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import gramian as gr
from .model import ControlSystem, linear_system, linearize
from .sim import SolverSpec

__all__ = [
    "StateProjection",
    "ParameterProjection",
    "ProjectedPrior",
    "ReducedModel",
    "svd_truncate",
    "energy_measure",
    "balanced_truncation",
    "balanced_pod",
    "reduce_state",
    "reduce_parameters",
    "combined_reduce",
]

log = logging.getLogger(__name__)

HANKEL_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class StateProjection:
    U1: np.ndarray          # n x r
    V1: np.ndarray          # r x n
    singular_values: np.ndarray
    r: int
    clamped: int = 0        # negative gramian eigenvalues set to zero


@dataclass(frozen=True, eq=False)
class ParameterProjection:
    Pi1: np.ndarray         # p x q
    Lambda1: np.ndarray     # q x p
    singular_values: np.ndarray
    q: int


@dataclass(frozen=True, eq=False)
class ProjectedPrior:
    mean: np.ndarray
    covariance: np.ndarray


def _fix_signs(U, Vh=None):
    """Make the largest-magnitude entry of every column of ``U`` positive."""
    if U.size == 0:
        return U, Vh
    idx = np.argmax(np.abs(U), axis=0)
    s = np.sign(U[idx, np.arange(U.shape[1])])
    s[s == 0] = 1.0
    U = U * s
    if Vh is not None:
        Vh = Vh * s[:, None]
    return U, Vh


def _order_from_eps(sv, eps):
    tails = np.concatenate([np.cumsum(sv[::-1])[::-1], [0.0]])  # tails[r] = sum_{k>=r} sv[k]
    return int(np.argmax(tails <= eps))


def svd_truncate(W, r: int | None = None, eps: float | None = None,
                 galerkin: bool = True) -> StateProjection:
    """Direct truncation of a (cross) gramian by its SVD ``W = U D V``.

    Exactly one of ``r`` (order) or ``eps`` (bound on the discarded
    singular-value sum) is given. With ``galerkin`` the test basis is
    ``U1^T``; otherwise the leading rows of ``V``, rescaled so that
    ``V1 U1 = I``.
    """
    W = np.atleast_2d(np.asarray(W, dtype=float))
    if W.shape[0] != W.shape[1]:
        raise ValueError("W must be square")
    if (r is None) == (eps is None):
        raise ValueError("give exactly one of r or eps")
    n = W.shape[0]
    U, sv, Vh = np.linalg.svd(W)
    U, Vh = _fix_signs(U, Vh)
    if eps is not None:
        if eps < 0:
            raise ValueError("eps must be nonnegative")
        r = _order_from_eps(sv, eps)
    if not 0 <= r <= n:
        raise ValueError(f"order r={r} outside [0, {n}]")
    U1 = U[:, :r]
    if galerkin:
        V1 = U1.T.copy()
    else:
        V1 = np.linalg.solve(Vh[:r] @ U1, Vh[:r])
    return StateProjection(U1, V1, sv, r)


def energy_measure(singular_values, k: int) -> float:
    """Fraction of the singular-value sum carried by the leading ``k``."""
    sv = np.asarray(singular_values, dtype=float)
    if not 0 <= k <= len(sv):
        raise ValueError("k outside [0, n]")
    partial = np.concatenate([[0.0], np.cumsum(sv)])
    total = partial[-1]
    return float(partial[k] / total) if total > 0 else 0.0


def _psd_factor(W):
    lam, Q = np.linalg.eigh(0.5 * (W + W.T))
    neg = int(np.sum(lam < 0))
    return Q * np.sqrt(np.clip(lam, 0.0, None)), neg


def balanced_truncation(W_C, W_O, r: int) -> StateProjection:
    """Square-root balanced truncation of a gramian pair.

    Factors ``W_C = L_C L_C^T`` and ``W_O = L_O L_O^T`` from symmetric
    eigendecompositions, takes ``svd(L_O^T L_C) = U S V^T`` and returns
    ``U1 = L_C V_1 S_1^{-1/2}``, ``V1 = S_1^{-1/2} U_1^T L_O^T``.
    """
    W_C = np.atleast_2d(np.asarray(getattr(W_C, "matrix", W_C), dtype=float))
    W_O = np.atleast_2d(np.asarray(getattr(W_O, "matrix", W_O), dtype=float))
    n = W_C.shape[0]
    if not 0 <= r <= n:
        raise ValueError(f"order r={r} outside [0, {n}]")
    L_C, neg_c = _psd_factor(W_C)
    L_O, neg_o = _psd_factor(W_O)
    if neg_c or neg_o:
        log.debug("clamped %d negative gramian eigenvalues", neg_c + neg_o)
    Uh, hsv, Vh = np.linalg.svd(L_O.T @ L_C)
    Uh, Vh = _fix_signs(Uh, Vh)
    usable = int(np.sum(hsv > HANKEL_FLOOR))
    if usable < r:
        warnings.warn(f"only {usable} Hankel singular values above {HANKEL_FLOOR:g}; "
                      f"order reduced from {r}", RuntimeWarning, stacklevel=2)
        r = usable
    s = 1.0 / np.sqrt(hsv[:r])
    U1 = (L_C @ Vh[:r].T) * s
    V1 = (Uh[:, :r].T @ L_O.T) * s[:, None]
    return StateProjection(U1, V1, hsv, r, clamped=neg_c + neg_o)


def _adjoint(system: ControlSystem, theta):
    A, B, C = linearize(system, theta)
    return linear_system(A.T, C.T, B.T, name=f"adjoint({system.name})")


def balanced_pod(system: ControlSystem, pert: gr.PerturbationConfig, spec: SolverSpec,
                 theta=None, r: int = 1) -> StateProjection:
    """Balanced POD: both gramians from input-driven simulations.

    The observability gramian is the controllability gramian of the adjoint
    of the steady-state linearization ``(A^T, C^T, B^T)``.
    """
    theta = system.theta if theta is None else theta
    wc = gr.empirical_controllability(system, pert, spec, theta)
    adj = _adjoint(system, theta)
    pa = pert
    if adj.m != system.m:
        pa = gr.PerturbationConfig(input_scales=pert.input_scales, input_kind=pert.input_kind)
    wo = gr.empirical_controllability(adj, pa, spec)
    return balanced_truncation(wc.matrix, wo.matrix, r)


class ReducedModel:
    """A projected model ``x~' = V1 f(U1 x~, u, Pi1 th~)``, ``y = g(U1 x~, u, Pi1 th~)``.

    Either projection may be absent. :attr:`system` exposes the reduced
    model as an ordinary :class:`ControlSystem` with ``r`` states and
    ``q`` parameters.
    """

    def __init__(self, base: ControlSystem, state_proj: StateProjection | None = None,
                 param_proj: ParameterProjection | None = None, theta=None):
        self.base = base
        self.state_proj = state_proj
        self.param_proj = param_proj
        self.theta = base.theta if theta is None else np.asarray(theta, dtype=float)

    def lift_params(self, theta_r):
        if self.param_proj is None:
            return np.asarray(theta_r, dtype=float)
        return np.asarray(theta_r) @ self.param_proj.Pi1.T

    def restrict_params(self, theta):
        if self.param_proj is None:
            return np.asarray(theta, dtype=float)
        return np.asarray(theta) @ self.param_proj.Lambda1.T

    def restrict_state(self, x):
        if self.state_proj is None:
            return np.asarray(x, dtype=float)
        return np.asarray(x) @ self.state_proj.V1.T

    @cached_property
    def system(self) -> ControlSystem:
        b = self.base
        sp, pp = self.state_proj, self.param_proj
        f0, g0 = b.f, b.g
        cache = [None, None]

        def lift(th):
            # integrators pass the same parameters to every stage
            if pp is None:
                return th
            last = cache[0]
            if last is None or last.shape != np.shape(th) or not np.array_equal(last, th):
                cache[0] = np.array(th, dtype=float, copy=True)
                cache[1] = self.lift_params(th)
            return cache[1]
        if sp is None:
            def f(x, u, th):
                return f0(x, u, lift(th))

            def g(x, u, th):
                return g0(x, u, lift(th))
            n = b.n
        else:
            U1, V1T = sp.U1, sp.V1.T

            def f(x, u, th):
                return f0(x @ U1.T, u, lift(th)) @ V1T

            def g(x, u, th):
                return g0(x @ U1.T, u, lift(th))
            n = sp.r
        return ControlSystem(
            n=n, m=b.m, o=b.o, p=b.p if pp is None else pp.q, f=f, g=g,
            x_bar=self.restrict_state(b.x_bar), u_bar=b.u_bar, y_bar=b.y_bar,
            theta=self.restrict_params(self.theta),
            partitionable=b.partitionable, vectorized=b.vectorized,
            param_map=b.param_map if pp is None else None,
            name=f"reduced({b.name})",
        )


def reduce_state(system: ControlSystem, proj: StateProjection, theta=None) -> ReducedModel:
    if proj.U1.shape[0] != system.n:
        raise ValueError("projection does not match the state dimension")
    return ReducedModel(system, state_proj=proj, theta=theta)


def _param_projection(W, q):
    W = np.atleast_2d(np.asarray(getattr(W, "matrix", W), dtype=float))
    p = W.shape[0]
    if not 0 <= q <= p:
        raise ValueError(f"q={q} outside [0, {p}]")
    U, sv, _ = np.linalg.svd(W)
    U, _ = _fix_signs(U)
    Pi1 = U[:, :q]
    return ParameterProjection(Pi1, Pi1.T.copy(), sv, q)


def reduce_parameters(system: ControlSystem, W_param, q: int, theta=None, prior=None):
    """Parameter reduction from the SVD of a parameter gramian.

    Returns ``(model, projection, reduced_prior)``; the prior is projected
    as ``Lambda1 mu`` and ``Lambda1 Sigma Lambda1^T`` (``None`` without a
    prior).
    """
    proj = _param_projection(W_param, q)
    model = ReducedModel(system, param_proj=proj, theta=theta)
    reduced = None
    if prior is not None:
        L = proj.Lambda1
        reduced = ProjectedPrior(L @ prior.mean, (L * np.asarray(prior.variance)) @ L.T)
    return model, proj, reduced


def combined_reduce(system: ControlSystem, theta, prior, variant: str, r: int, q: int,
                    pert: gr.PerturbationConfig, spec: SolverSpec, mode: str = "schur",
                    galerkin: bool = True):
    """Combined state and parameter reduction.

    ``variant`` selects the gramians: ``"controllability"`` (sensitivity
    gramian + empirical observability, balanced truncation),
    ``"observability"`` (identifiability gramian + empirical
    controllability, balanced truncation) or ``"joint"`` (joint gramian,
    direct truncation of its cross-gramian block). Gramians are computed at
    ``theta``; the returned model carries ``gramians`` and ``reduced_prior``
    attributes.
    """
    theta = system.theta if theta is None else np.asarray(theta, dtype=float)
    if variant == "controllability":
        ws, wc = gr.empirical_sensitivity(system, pert, spec, theta)
        wo = gr.empirical_observability(system, pert, spec, theta)
        state = balanced_truncation(wc.matrix, wo.matrix, r)
        wp = ws
        used = (ws, wc, wo)
    elif variant == "observability":
        if system.m != system.o:
            raise ValueError("observability variant needs a square system")
        wi, wo = gr.empirical_identifiability(system, pert, spec, theta, mode=mode)
        wc = gr.empirical_controllability(system, pert, spec, theta)
        state = balanced_truncation(wc.matrix, wo.matrix, r)
        wp = wi
        used = (wi, wo, wc)
    elif variant == "joint":
        if system.m != system.o:
            raise ValueError("joint variant needs a square system")
        wx, widd = gr.empirical_joint(system, pert, spec, theta)
        state = svd_truncate(wx.matrix, r=r, galerkin=galerkin)
        wp = widd
        used = (wx, widd)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    pproj = _param_projection(wp, q)
    model = ReducedModel(system, state_proj=state, param_proj=pproj, theta=theta)
    model.gramians = used
    model.reduced_prior = None
    if prior is not None:
        L = pproj.Lambda1
        model.reduced_prior = ProjectedPrior(L @ prior.mean, (L * np.asarray(prior.variance)) @ L.T)
    return model

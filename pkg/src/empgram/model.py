"""Parametrized control systems and the two benchmark network models."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

__all__ = [
    "ControlSystem",
    "make_linear_network",
    "make_hyperbolic_network",
    "random_stable_symmetric",
    "dominant_stable_symmetric",
    "augment",
    "linearize",
    "linear_system",
    "network_matrix",
    "symmetric_param_map",
]


@dataclass(frozen=True, eq=False)
class ControlSystem:
    """A control system ``x' = f(x, u, theta)``, ``y = g(x, u, theta)``.

    The evaluators take state, input and parameter arrays. When
    ``vectorized`` is set they accept arbitrary leading batch dimensions
    (``x`` of shape ``(..., n)`` and so on), which lets the integrator run
    many perturbed simulations with one array operation per stage.

    Parameters
    ----------
    n, m, o, p : int
        State, input, output and parameter dimensions.
    f, g : callable
        Vector field and output map.
    x_bar, u_bar, y_bar : ndarray
        Steady state triple, valid at the nominal parameter ``theta``.
    theta : ndarray
        Nominal parameter vector.
    partitionable : bool
        The vector field splits additively into an input part and one term
        per parameter, as required by the sensitivity gramian.
    param_map : ndarray of int, optional
        ``theta = z[param_map]`` expands a vector ``z`` of free parameters.
        Used by the inversion to keep structural constraints (symmetry).
    linear : tuple of callables, optional
        ``(A(theta), B, C)`` if the system is linear in the state.
    """

    n: int
    m: int
    o: int
    p: int
    f: Callable
    g: Callable
    x_bar: np.ndarray
    u_bar: np.ndarray
    y_bar: np.ndarray
    theta: np.ndarray
    partitionable: bool = False
    vectorized: bool = False
    param_map: np.ndarray | None = None
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for dim in ("n", "m", "o", "p"):
            if getattr(self, dim) < 0:
                raise ValueError(f"{dim} must be nonnegative")
        object.__setattr__(self, "x_bar", np.asarray(self.x_bar, dtype=float).reshape(self.n))
        object.__setattr__(self, "u_bar", np.asarray(self.u_bar, dtype=float).reshape(self.m))
        object.__setattr__(self, "y_bar", np.asarray(self.y_bar, dtype=float).reshape(self.o))
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float).reshape(self.p))
        if self.param_map is not None:
            pm = np.asarray(self.param_map, dtype=int).reshape(self.p)
            object.__setattr__(self, "param_map", pm)

    @property
    def n_free(self) -> int:
        """Number of free parameters seen by an optimizer."""
        if self.param_map is None:
            return self.p
        return int(self.param_map.max()) + 1 if self.p else 0

    def expand(self, z):
        """Map free parameters to the full parameter vector."""
        z = np.asarray(z, dtype=float)
        if self.param_map is None:
            return z
        return z[..., self.param_map]

    def free(self, theta):
        """Inverse of :meth:`expand` on the constraint manifold."""
        theta = np.asarray(theta, dtype=float)
        if self.param_map is None:
            return theta
        first = np.full(self.n_free, -1)
        for k in range(self.p - 1, -1, -1):
            first[self.param_map[k]] = k
        return theta[..., first]

    def with_theta(self, theta) -> "ControlSystem":
        """Copy with a different nominal parameter (steady state unchanged)."""
        return replace(self, theta=np.asarray(theta, dtype=float))

    def check(self, atol: float = 1e-8) -> None:
        """Assert the steady state and output dimensions are consistent."""
        dx = np.asarray(self.f(self.x_bar, self.u_bar, self.theta))
        y = np.asarray(self.g(self.x_bar, self.u_bar, self.theta))
        if dx.shape != (self.n,) or y.shape != (self.o,):
            raise ValueError("evaluator output has wrong dimension")
        if not np.all(np.abs(dx) <= atol):
            raise ValueError("f(x_bar, u_bar, theta) is not zero")
        if not np.allclose(y, self.y_bar, atol=atol):
            raise ValueError("g(x_bar, u_bar, theta) differs from y_bar")


def network_matrix(theta, n):
    """Assemble ``A`` from ``theta`` (column-major, batch dims allowed)."""
    theta = np.asarray(theta)
    return np.swapaxes(theta.reshape(theta.shape[:-1] + (n, n)), -1, -2)


def symmetric_param_map(n: int) -> np.ndarray:
    """Index map sending each entry of a column-major ``n x n`` matrix to
    its upper-triangle free parameter."""
    iu, ju = np.triu_indices(n)
    lookup = np.empty((n, n), dtype=int)
    lookup[iu, ju] = np.arange(len(iu))
    lookup[ju, iu] = np.arange(len(iu))
    # column-major flattening: theta[i + j*n] = A[i, j]
    return lookup.T.reshape(-1)


def random_stable_symmetric(n, rng, diag_mean=-1.0, margin=0.1):
    """Random symmetric matrix with all eigenvalues below ``-margin``.

    Off-diagonal draws are standard normal, diagonal draws have mean
    ``diag_mean``; the symmetrized matrix is shifted down when its largest
    eigenvalue is above ``-margin``.
    """
    M = rng.standard_normal((n, n))
    M[np.diag_indices(n)] += diag_mean
    return _stabilize(0.5 * (M + M.T), margin)


def dominant_stable_symmetric(n, rng, diag_factor=0.55, margin=0.1):
    """Random symmetric matrix with nonnegative couplings and a dominant
    negative diagonal.

    Off-diagonal draws are uniform on ``[0, 1)``, the diagonal is
    ``-diag_factor * n`` and the result is symmetrized. The Perron root of
    the coupling part concentrates near ``n / 2``, so the spectrum stays in
    the left half plane; the same shift as in
    :func:`random_stable_symmetric` guards the rare exceptions.
    """
    M = rng.uniform(0.0, 1.0, (n, n))
    M[np.diag_indices(n)] = -diag_factor * n
    return _stabilize(0.5 * (M + M.T), margin)


def _stabilize(A, margin):
    lam_max = np.linalg.eigvalsh(A)[-1]
    if lam_max >= -margin:
        A = A - (lam_max + margin) * np.eye(A.shape[0])
    return A


GENERATORS = ("dominant", "normal")


def _network(n, m, seed, hyperbolic, generator="dominant"):
    if n <= 0 or m <= 0:
        raise ValueError("n and m must be positive")
    if generator not in GENERATORS:
        raise ValueError(f"unknown generator {generator!r}")
    if round(np.sqrt(n)) ** 2 != n or round(np.sqrt(n)) != m:
        warnings.warn(f"non-benchmark pairing n={n}, m={m}", stacklevel=3)
    rng = np.random.default_rng(seed)
    if generator == "dominant":
        A = dominant_stable_symmetric(n, rng)
        B = rng.uniform(0.0, 1.0, (n, m))
    else:
        A = random_stable_symmetric(n, rng)
        B = rng.standard_normal((n, m)) / np.sqrt(n)
    C = B.T.copy()
    true_theta = A.reshape(-1, order="F").copy()

    if hyperbolic:
        def f(x, u, theta):
            return np.einsum("...ij,...j->...i", network_matrix(theta, n), np.tanh(x)) + u @ B.T
    else:
        def f(x, u, theta):
            return np.einsum("...ij,...j->...i", network_matrix(theta, n), x) + u @ B.T

    def g(x, u, theta):
        return x @ C.T

    system = ControlSystem(
        n=n, m=m, o=m, p=n * n, f=f, g=g,
        x_bar=np.zeros(n), u_bar=np.zeros(m), y_bar=np.zeros(m),
        theta=true_theta, partitionable=True, vectorized=True,
        param_map=symmetric_param_map(n),
        name="hyperbolic" if hyperbolic else "linear",
        meta={"B": B, "C": C, "seed": seed, "generator": generator},
    )
    return system, true_theta


def make_linear_network(n: int, m: int, seed: int, generator: str = "dominant"):
    """Model 1: ``x' = A(theta) x + B u``, ``y = C x`` with ``B = C^T``.

    ``A`` is symmetric and Hurwitz; ``theta`` is ``A`` flattened
    column-major, so ``p = n**2``. Returns ``(system, true_theta)``.

    Parameters
    ----------
    generator : {"dominant", "normal"}
        ``"dominant"`` draws ``A`` with :func:`dominant_stable_symmetric`
        and ``B`` uniform on ``[0, 1)``. ``"normal"`` uses
        :func:`random_stable_symmetric` and ``B ~ N(0, 1/n)``.
    """
    return _network(n, m, seed, hyperbolic=False, generator=generator)


def make_hyperbolic_network(n: int, m: int, seed: int, generator: str = "dominant"):
    """Model 2: ``x' = A(theta) tanh(x) + B u``, ``y = C x``.

    Shares ``A``, ``B``, ``C`` with :func:`make_linear_network` for equal
    arguments.
    """
    return _network(n, m, seed, hyperbolic=True, generator=generator)


def augment(system: ControlSystem, theta=None) -> ControlSystem:
    """Append the parameters as constant states.

    The returned system has ``n + p`` states, no parameters of its own, and
    steady state ``(x_bar; theta)``; its last ``p`` derivatives vanish.
    """
    theta = system.theta if theta is None else np.asarray(theta, dtype=float)
    if theta.shape != (system.p,):
        raise ValueError(f"expected {system.p} parameters, got shape {theta.shape}")
    if system.p == 0:
        return system
    n, p = system.n, system.p
    f0, g0 = system.f, system.g

    def f(x, u, _theta):
        dx = f0(x[..., :n], u, x[..., n:])
        return np.concatenate([dx, np.zeros(dx.shape[:-1] + (p,))], axis=-1)

    def g(x, u, _theta):
        return g0(x[..., :n], u, x[..., n:])

    return ControlSystem(
        n=n + p, m=system.m, o=system.o, p=0, f=f, g=g,
        x_bar=np.concatenate([system.x_bar, theta]),
        u_bar=system.u_bar, y_bar=system.y_bar, theta=np.zeros(0),
        vectorized=system.vectorized,
        name=f"augmented({system.name})",
        meta={"base": system, "n_base": n},
    )


def linearize(system: ControlSystem, theta=None, step: float = 1e-6):
    """Central-difference Jacobians ``(A, B, C)`` at the steady state."""
    theta = system.theta if theta is None else np.asarray(theta, dtype=float)
    x0, u0 = system.x_bar, system.u_bar

    def jac(fun, z0, wrt_x):
        cols = []
        for k in range(len(z0)):
            h = step * max(1.0, abs(z0[k]))
            e = np.zeros_like(z0)
            e[k] = h
            if wrt_x:
                d = fun(x0 + e, u0, theta) - fun(x0 - e, u0, theta)
            else:
                d = fun(x0, u0 + e, theta) - fun(x0, u0 - e, theta)
            cols.append(np.asarray(d) / (2 * h))
        return np.array(cols).T.reshape(-1, len(z0))

    A = jac(system.f, x0, True)
    B = jac(system.f, u0, False)
    C = jac(system.g, x0, True)
    return A, B, C


def linear_system(A, B, C, theta_dim: int = 0, name: str = "lti") -> ControlSystem:
    """Wrap a fixed LTI realization as a :class:`ControlSystem`."""
    A, B, C = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, B, C))
    n, m = B.shape
    o = C.shape[0]

    def f(x, u, theta):
        return x @ A.T + u @ B.T

    def g(x, u, theta):
        return x @ C.T

    return ControlSystem(
        n=n, m=m, o=o, p=theta_dim, f=f, g=g,
        x_bar=np.zeros(n), u_bar=np.zeros(m), y_bar=np.zeros(o),
        theta=np.zeros(theta_dim), vectorized=True, name=name,
        meta={"A": A, "B": B, "C": C},
    )

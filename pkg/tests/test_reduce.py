import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import subspace_angles

from empgram import gramian as gr
from empgram.invert import GaussianPrior, network_prior, relative_l2_error
from empgram.model import linear_system, make_hyperbolic_network, make_linear_network
from empgram.reduce import (ParameterProjection, ReducedModel, balanced_pod, balanced_truncation,
                            combined_reduce, energy_measure, reduce_parameters, reduce_state,
                            svd_truncate)
from empgram.sim import InputSignal, SolverSpec, integrate

from conftest import symmetric_lti

SPEC = SolverSpec()
UNIT = gr.PerturbationConfig()


def pulse(m):
    return InputSignal("impulse", np.ones(m) / np.sqrt(m), np.sqrt(m))


def output_error(system, proj, theta=None):
    theta = system.theta if theta is None else theta
    u = pulse(system.m)
    y = integrate(system, u, system.x_bar, theta, SPEC)
    red = reduce_state(system, proj, theta).system
    return relative_l2_error(y, integrate(red, u, red.x_bar, red.theta, SPEC))


# --- direct truncation and energy --------------------------------------------

def test_identity_full_retention(rng):
    proj = svd_truncate(np.eye(5), r=5)
    x = rng.standard_normal(5)
    assert np.linalg.norm(proj.U1 @ proj.V1 @ x - x) <= 1e-14
    np.testing.assert_allclose(proj.U1.T @ proj.U1, np.eye(5), atol=1e-14)


def test_threshold_arithmetic():
    proj = svd_truncate(np.diag([3.0, 2.0, 1.0]), eps=1.0)
    assert proj.r == 2
    assert svd_truncate(np.diag([3.0, 2.0, 1.0]), eps=0.5).r == 3
    assert svd_truncate(np.diag([3.0, 2.0, 1.0]), eps=6.0).r == 0
    assert svd_truncate(np.diag([3.0, 2.0, 1.0]), eps=3.0).r == 1


def test_rank_one_energy(rng):
    a, b = rng.standard_normal(4), rng.standard_normal(4)
    proj = svd_truncate(np.outer(a, b), r=1)
    assert energy_measure(proj.singular_values, 1) == pytest.approx(1.0)


@pytest.mark.parametrize("kwargs", [dict(r=4), dict(eps=-1.0), dict(), dict(r=1, eps=1.0)])
def test_svd_truncate_errors(kwargs):
    with pytest.raises(ValueError):
        svd_truncate(np.eye(3), **kwargs)


def test_energy_measure_values():
    sv = np.array([3.0, 2.0, 1.0])
    assert energy_measure(sv, 3) == 1.0
    assert energy_measure(sv, 0) == 0.0
    assert energy_measure(sv, 2) == 5 / 6
    with pytest.raises(ValueError):
        energy_measure(sv, 4)


@given(st.lists(st.floats(0.0, 100.0), min_size=1, max_size=12))
def test_energy_monotone(values):
    sv = np.sort(np.asarray(values))[::-1]
    e = [energy_measure(sv, k) for k in range(len(sv) + 1)]
    assert all(b >= a for a, b in zip(e, e[1:]))
    assert e[-1] == (1.0 if sv.sum() > 0 else 0.0)


@given(st.integers(2, 8), st.integers(0, 10_000), st.booleans())
@settings(max_examples=30, deadline=None)
def test_projection_biorthogonality(n, seed, galerkin):
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((n, n))
    r = int(rng.integers(1, n + 1))
    proj = svd_truncate(W, r=r, galerkin=galerkin)
    np.testing.assert_allclose(proj.V1 @ proj.U1, np.eye(r), atol=1e-10)
    np.testing.assert_allclose(proj.U1.T @ proj.U1, np.eye(r), atol=1e-10)
    sv = np.linalg.svd(W, compute_uv=False)
    np.testing.assert_allclose(proj.singular_values, sv)
    assert np.all(np.diff(proj.singular_values) <= 0)


def test_sign_convention_is_deterministic(rng):
    W = rng.standard_normal((5, 5))
    for proj in (svd_truncate(W, r=3), svd_truncate(-W, r=3)):
        idx = np.argmax(np.abs(proj.U1), axis=0)
        assert np.all(proj.U1[idx, np.arange(3)] > 0)


# --- balanced truncation ----------------------------------------------------

def test_balanced_diagonal_case():
    sigma = np.array([3.0, 2.0, 0.5])
    proj = balanced_truncation(np.diag(sigma), np.diag(sigma), 2)
    np.testing.assert_allclose(proj.singular_values, sigma)
    np.testing.assert_allclose(np.abs(proj.U1), np.eye(3)[:, :2], atol=1e-14)


def test_balanced_scalar():
    assert balanced_truncation([[4.0]], [[1.0]], 1).singular_values[0] == pytest.approx(2.0)


def test_balanced_oracle_hankel_values(rng):
    A, B, C = symmetric_lti(6, 6, rng)
    WC = gr.lyapunov_oracle(A, B @ B.T)
    WO = gr.lyapunov_oracle(A.T, C.T @ C)
    proj = balanced_truncation(WC, WO, 3)
    lx = np.sort(np.abs(np.linalg.eigvals(gr.sylvester_oracle(A, B, C))))[::-1]
    np.testing.assert_allclose(proj.singular_values, lx, rtol=1e-8)
    np.testing.assert_allclose(proj.V1 @ proj.U1, np.eye(3), atol=1e-8)


def test_balanced_floor_reduces_order():
    with pytest.warns(RuntimeWarning, match="Hankel"):
        proj = balanced_truncation(np.diag([1.0, 0.0]), np.eye(2), 2)
    assert proj.r == 1


def test_balanced_clamps_negative_eigenvalues():
    proj = balanced_truncation(np.diag([1.0, -1e-14]), np.eye(2), 1)
    assert proj.clamped == 1


def test_balanced_order_errors():
    with pytest.raises(ValueError):
        balanced_truncation(np.eye(2), np.eye(2), 3)


def test_balanced_pod_matches_balanced_truncation_subspace():
    system, theta = make_linear_network(9, 3, 2)
    spec = SolverSpec(T=1.0)
    bpod = balanced_pod(system, UNIT, spec, theta, 3)
    wc = gr.empirical_controllability(system, UNIT, spec, theta).matrix
    # for A = A^T, B = C^T the adjoint realization is the system itself
    bt_adj = balanced_truncation(wc, wc, 3)
    assert np.max(subspace_angles(bpod.U1, bt_adj.U1)) <= 1e-6
    wo = gr.empirical_observability(system, UNIT, spec, theta).matrix
    bt = balanced_truncation(wc, wo, 3)
    assert np.max(subspace_angles(bpod.U1, bt.U1)) <= 0.05


def test_balanced_pod_scalar_equals_balanced_truncation():
    s = linear_system([[-2.0]], [[1.5]], [[1.5]])
    a = balanced_pod(s, UNIT, SPEC, None, 1)
    wc = gr.empirical_controllability(s, UNIT, SPEC).matrix
    b = balanced_truncation(wc, wc, 1)
    np.testing.assert_allclose(a.U1, b.U1, rtol=1e-12)
    np.testing.assert_allclose(a.singular_values, b.singular_values, rtol=1e-12)


def test_balanced_pod_nonlinear_uses_linearization():
    hyp, theta = make_hyperbolic_network(4, 2, 0)
    lin, _ = make_linear_network(4, 2, 0)
    bpod = balanced_pod(hyp, UNIT, SPEC, theta, 2)
    wc = gr.empirical_controllability(hyp, UNIT, SPEC, theta).matrix
    # tanh'(0) = 1: the adjoint gramian is the linear model's one
    wo = gr.empirical_controllability(lin, UNIT, SPEC, theta).matrix
    ref = balanced_truncation(wc, wo, 2)
    np.testing.assert_allclose(bpod.singular_values, ref.singular_values, rtol=1e-6)
    assert np.max(subspace_angles(bpod.U1, ref.U1)) <= 1e-6


@pytest.mark.parametrize("method", ["bpod", "bt", "dt"])
def test_no_truncation_reproduces_outputs(method):
    system, theta = make_linear_network(4, 2, 1)
    wc = gr.empirical_controllability(system, UNIT, SPEC).matrix
    wo = gr.empirical_observability(system, UNIT, SPEC).matrix
    proj = {"bpod": lambda: balanced_pod(system, UNIT, SPEC, theta, 4),
            "bt": lambda: balanced_truncation(wc, wo, 4),
            "dt": lambda: svd_truncate(gr.empirical_cross(system, UNIT, SPEC).matrix, r=4)}[method]()
    assert output_error(system, proj) <= 1e-8


# --- reduced models -----------------------------------------------------------

def test_reduce_state_orthogonal_full(rng):
    system, theta = make_hyperbolic_network(4, 2, 0)
    Q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    proj = svd_truncate(Q @ np.diag([4.0, 3, 2, 1]) @ Q.T, r=4)
    assert output_error(system, proj) <= 1e-8


@pytest.mark.parametrize("maker,tol", [(make_linear_network, 1e-2), (make_hyperbolic_network, 5e-2)])
def test_reduce_state_benchmark_size(maker, tol):
    system, theta = maker(16, 4, 0)
    proj = svd_truncate(gr.empirical_cross(system, UNIT, SPEC).matrix, r=4)
    assert output_error(system, proj) <= tol


def test_reduced_steady_state_output():
    system, theta = make_linear_network(16, 4, 0)
    proj = svd_truncate(gr.empirical_cross(system, UNIT, SPEC).matrix, r=4)
    red = reduce_state(system, proj).system
    y = integrate(red, None, red.x_bar, red.theta, SPEC).snapshots
    assert np.all(y == system.y_bar)


def test_reduce_state_dimension_check():
    system, _ = make_linear_network(4, 2, 0)
    with pytest.raises(ValueError):
        reduce_state(system, svd_truncate(np.eye(3), r=2))


def test_reduced_linear_realization(rng):
    A, B, C = symmetric_lti(5, 2, rng)
    s = linear_system(A, B, C)
    proj = balanced_truncation(gr.lyapunov_oracle(A, B @ B.T), gr.lyapunov_oracle(A, C.T @ C), 5)
    V1, U1 = proj.V1, proj.U1
    red = linear_system(V1 @ A @ U1, V1 @ B, C @ U1)
    u = InputSignal("impulse", np.array([1.0, 0.0]))
    y = integrate(s, u, np.zeros(5), None, SPEC)
    yr = integrate(red, u, np.zeros(5), None, SPEC)
    assert relative_l2_error(y, yr) <= 1e-8


def test_error_decreases_with_order_on_average():
    errs = {4: [], 6: []}
    for seed in range(10):
        system, theta = make_linear_network(16, 4, seed)
        wx = gr.empirical_cross(system, UNIT, SPEC).matrix
        for r in errs:
            errs[r].append(output_error(system, svd_truncate(wx, r=r)))
    assert np.mean(errs[4]) >= np.mean(errs[6])
    assert np.mean(np.array(errs[4]) < np.array(errs[6])) <= 0.1


# --- parameter projections ----------------------------------------------------

def test_full_parameter_basis_is_exact(rng):
    system, theta = make_linear_network(4, 2, 0)
    W = rng.standard_normal((16, 16))
    _, proj, _ = reduce_parameters(system, W @ W.T, 16)
    np.testing.assert_allclose(proj.Pi1 @ proj.Lambda1 @ theta, theta, atol=1e-13)
    np.testing.assert_allclose(proj.Lambda1 @ proj.Pi1, np.eye(16), atol=1e-10)


def test_dominant_diagonal_entry_selected():
    system, _ = make_linear_network(4, 2, 0)
    d = np.ones(16)
    d[5] = 100.0
    _, proj, _ = reduce_parameters(system, np.diag(d), 1)
    np.testing.assert_array_equal(proj.Pi1[:, 0], np.eye(16)[5])


def test_reconstruction_error_nonincreasing(rng):
    system, theta = make_linear_network(4, 2, 0)
    W = rng.standard_normal((16, 16))
    errs = []
    for q in range(17):
        _, proj, _ = reduce_parameters(system, W @ W.T, q)
        errs.append(np.linalg.norm(theta - proj.Pi1 @ proj.Lambda1 @ theta))
    assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))
    assert errs[-1] <= 1e-12


def test_prior_projection():
    system, _ = make_linear_network(4, 2, 0)
    prior = GaussianPrior(np.arange(16.0), np.linspace(1, 2, 16))
    _, proj, red = reduce_parameters(system, np.diag(np.arange(16.0, 0, -1)), 3, prior=prior)
    L = proj.Lambda1
    np.testing.assert_allclose(red.mean, L @ prior.mean)
    np.testing.assert_allclose(red.covariance, L @ np.diag(prior.variance) @ L.T)
    np.testing.assert_allclose(red.mean, [0.0, 1.0, 2.0])


def test_parameter_order_error():
    system, _ = make_linear_network(4, 2, 0)
    with pytest.raises(ValueError):
        reduce_parameters(system, np.eye(16), 17)


def test_reduced_model_parameter_round_trip():
    system, theta = make_linear_network(4, 2, 0)
    _, proj, _ = reduce_parameters(system, np.diag(np.arange(16.0, 0, -1)), 4)
    model = ReducedModel(system, param_proj=proj)
    th_r = model.restrict_params(theta)
    lifted = model.lift_params(th_r)
    np.testing.assert_allclose(lifted - proj.Pi1 @ proj.Lambda1 @ lifted, 0, atol=1e-14)
    assert model.system.p == 4 and model.system.param_map is None


# --- combined reduction ----------------------------------------------------------

def combined_setup(n=4, m=2, seed=0):
    system, theta = make_linear_network(n, m, seed)
    u = pulse(m)
    prior = network_prior(n)
    from empgram.invert import prior_perturbation
    return system, theta, u, prior, prior_perturbation(prior, excitation=u)


@pytest.mark.parametrize("variant", ["controllability", "observability", "joint"])
def test_combined_without_truncation(variant):
    system, theta, u, prior, pert = combined_setup(16, 4)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        model = combined_reduce(system, theta, prior, variant, 16, 256, pert, SPEC)
    y = integrate(system, u, system.x_bar, theta, SPEC)
    red = model.system
    yr = integrate(red, u, red.x_bar, model.restrict_params(theta), SPEC)
    assert relative_l2_error(y, yr) <= 1e-6
    assert model.reduced_prior.mean.shape == (256,)


def test_combined_joint_single_pass_count():
    system, theta, u, prior, pert = combined_setup()
    model = combined_reduce(system, prior.mean, prior, "joint", 2, 4, gr.PerturbationConfig(), SPEC)
    wx, widd = model.gramians
    assert wx.n_simulations == 1 * 1 * 2 + 1 * 1 * (4 + 16)


def test_combined_variant_errors():
    system, theta, u, prior, pert = combined_setup()
    with pytest.raises(ValueError):
        combined_reduce(system, theta, prior, "hankel", 2, 4, pert, SPEC)
    rect = linear_system(-np.eye(2), np.ones((2, 1)), np.eye(2), theta_dim=1)
    for variant in ("observability", "joint"):
        with pytest.raises(ValueError):
            combined_reduce(rect, None, None, variant, 1, 1, gr.PerturbationConfig(), SPEC)

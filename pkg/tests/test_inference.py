"""Solver layers against hand values, normal equations, and dense oracles."""

import numpy as np
import pytest

from dgcrf.errors import ParameterError
from dgcrf.inference import (
    DEFAULT_BETA_MULTIPLIERS,
    HQSSchedule,
    InferenceState,
    dgcrf_forward,
    direct_solve_oracle,
    gcrf_energy,
    hqs_cost,
    hqs_joint_minimizer,
    hqs_layer,
    image_formation,
    formation_from_rows,
    patch_inference,
    patch_inference_rows,
)
from dgcrf.linalg import prior_ridge
from dgcrf.patches import accumulate_patches, coverage_counts, extract_patches, mean_projection
from helpers import random_bank, random_spd


def spd_stack(seed, n, m, floor=0.1):
    rng = np.random.Generator(np.random.PCG64(seed))
    return np.stack([random_spd(rng, m, floor=floor) for _ in range(n)])


# ---------------------------------------------------------------- schedule

def test_default_schedule_ladder():
    assert DEFAULT_BETA_MULTIPLIERS == (1.0, 4.0, 8.0, 16.0, 32.0, 64.0)
    sched = HQSSchedule.default(4)
    assert sched.multipliers == (1.0, 4.0, 8.0, 16.0)
    assert sched.n_layers == 4
    with pytest.raises(ParameterError, match="requested 7"):
        HQSSchedule.default(7)


def test_schedule_resolve_divides_by_sigma2():
    sched = HQSSchedule((2.0, 6.0))
    np.testing.assert_array_equal(sched.resolve(0.5), [4.0, 12.0])
    with pytest.raises(ParameterError, match="sigma2"):
        sched.resolve(0.0)


def test_schedule_validation():
    with pytest.raises(ParameterError, match="positive"):
        HQSSchedule((1.0, -4.0))
    with pytest.raises(ParameterError, match="non-decreasing"):
        HQSSchedule((4.0, 1.0))
    assert HQSSchedule(()).n_layers == 0
    assert HQSSchedule((3.0, 3.0)).n_layers == 2  # plateaus are allowed


# ---------------------------------------------------------- patch inference

def test_patch_inference_hand_value():
    # beta*Sigma = I: the operator is I + G and solve(I + G, G y) = G y / 2,
    # so z = y - G y / 2
    y = np.array([1.0, 0.0, 0.0, 0.0])
    z = patch_inference(y, np.eye(4), beta=1.0)
    np.testing.assert_allclose(z, [0.625, 0.125, 0.125, 0.125], atol=1e-14)


def test_patch_inference_keeps_constant_patches():
    sigma = spd_stack(0, 1, 9)[0]
    y = np.full(9, 0.42)
    np.testing.assert_allclose(patch_inference(y, sigma, beta=3.0), y, atol=1e-15)


def test_patch_inference_matches_normal_equations():
    rng = np.random.Generator(np.random.PCG64(1))
    for trial in range(20):
        d = 2 + trial % 2
        m = d * d
        sigma = random_spd(rng, m)
        y = rng.standard_normal(m)
        beta = float(10.0 ** rng.uniform(-1, 1))
        z = patch_inference(y, sigma, beta)
        g = mean_projection(d)
        c = g @ np.linalg.solve(sigma, g)
        c = 0.5 * (c + c.T)
        want = np.linalg.solve(c + beta * np.eye(m), beta * y)
        assert np.linalg.norm(z - want) / np.linalg.norm(want) < 1e-9


def test_patch_inference_validation():
    with pytest.raises(ParameterError, match="Sigma shape"):
        patch_inference(np.zeros(4), np.eye(3), beta=1.0)
    with pytest.raises(ParameterError, match="beta"):
        patch_inference(np.zeros(4), np.eye(4), beta=0.0)
    with pytest.raises(ParameterError, match="ridge"):
        patch_inference(np.zeros(4), np.eye(4), beta=1.0, ridge=-1e-9)


def test_patch_inference_rows_matches_scalar_loop():
    rng = np.random.Generator(np.random.PCG64(2))
    n, m = 12, 9
    sigma = spd_stack(3, n, m)
    y_rows = rng.standard_normal((n, m))
    beta = 2.5
    ridge_vec = rng.uniform(1e-8, 1e-6, size=n)
    scaled = beta * sigma
    z_rows, op, u = patch_inference_rows(y_rows, scaled, ridge_vec)
    assert np.shares_memory(op, scaled)  # the stack is consumed in place
    for p in range(n):
        want = patch_inference(y_rows[p], sigma[p], beta, ridge=float(ridge_vec[p]))
        np.testing.assert_allclose(z_rows[p], want, atol=1e-12)


# ---------------------------------------------------------- image formation

def test_formation_is_fixed_point_on_clean_patches():
    rng = np.random.Generator(np.random.PCG64(4))
    x = rng.random((7, 9))
    pset = extract_patches(x, 3)
    y = image_formation(pset, x, sigma2=0.3, beta=5.0)
    np.testing.assert_allclose(y, x, rtol=1e-14)


def test_formation_hand_map():
    # 3x3 image, d=2, X = 1, all auxiliaries 0.5, sigma^2 = beta = 1:
    # Y = (1 + 0.5 N) / (1 + N) pixel-wise with N the coverage count
    x = np.ones((3, 3))
    z_rows = np.full((4, 4), 0.5)
    counts = coverage_counts(3, 3, 2).astype(np.float64)
    y = formation_from_rows(z_rows, x, sigma2=1.0, beta=1.0, counts=counts, side=2)
    e, c = 2.0 / 3.0, 0.75
    np.testing.assert_allclose(y, [[c, e, c], [e, 0.6, e], [c, e, c]], atol=1e-15)


def test_formation_zero_beta_returns_input():
    rng = np.random.Generator(np.random.PCG64(5))
    x = rng.random((5, 5))
    z_rows = rng.random((16, 4))
    counts = coverage_counts(5, 5, 2).astype(np.float64)
    y = formation_from_rows(z_rows, x, sigma2=0.1, beta=0.0, counts=counts, side=2)
    np.testing.assert_allclose(y, x, rtol=1e-15)


def test_formation_solves_pixelwise_stationarity():
    rng = np.random.Generator(np.random.PCG64(6))
    x = rng.random((6, 8))
    side = 3
    pset = extract_patches(x, side)
    z_rows = rng.random(pset.patches.shape)
    sigma2, beta = 0.04, 7.0
    counts = pset.counts.astype(np.float64)
    y = formation_from_rows(z_rows, x, sigma2, beta, counts, side)
    s = accumulate_patches(z_rows, 6, 8, side)
    residual = 2.0 * (y - x) / sigma2 + 2.0 * beta * (counts * y - s)
    assert np.max(np.abs(residual)) < 1e-10


def test_formation_validation():
    pset = extract_patches(np.ones((4, 4)), 2)
    with pytest.raises(ParameterError, match="geometry"):
        image_formation(pset, np.ones((5, 5)), sigma2=1.0, beta=1.0)
    with pytest.raises(ParameterError, match="sigma2"):
        image_formation(pset, np.ones((4, 4)), sigma2=0.0, beta=1.0)


# ---------------------------------------------------------------- hqs layer

def test_layer_keeps_constant_images():
    x = np.full((6, 6), 0.5)
    sigma = spd_stack(7, 16, 9)
    state = hqs_layer(InferenceState(estimate=x), sigma, x, sigma2=0.01, beta=30.0)
    np.testing.assert_allclose(state.estimate, x, atol=1e-14)
    assert len(state.layers) == 1


def test_layer_matches_naive_recomputation():
    rng = np.random.Generator(np.random.PCG64(8))
    x = rng.random((6, 6))
    y0 = rng.random((6, 6))
    side, m = 3, 9
    sigma = spd_stack(9, 16, m)
    sigma2, beta, scale = 0.02, 12.0, 1e-6
    state = hqs_layer(InferenceState(estimate=y0), sigma.copy(), x, sigma2, beta, ridge_scale=scale)

    g = mean_projection(side)
    pset = extract_patches(y0, side)
    z_naive = np.empty_like(pset.patches)
    for p in range(16):
        scaled = beta * sigma[p]
        eps = scale * (np.trace(scaled) + (m - 1)) / m
        a = scaled + g + eps * np.eye(m)
        yp = pset.patches[p]
        u = np.linalg.solve(a, yp - yp.mean())
        z_naive[p] = yp - (u - u.mean())
    s = accumulate_patches(z_naive, 6, 6, side)
    counts = pset.counts.astype(np.float64)
    y_naive = (x / sigma2 + beta * s) / (1.0 / sigma2 + beta * counts)
    np.testing.assert_allclose(state.estimate, y_naive, atol=1e-12)
    np.testing.assert_allclose(state.layers[0].z_rows, z_naive, atol=1e-12)


def test_layer_iterates_decrease_split_cost():
    rng = np.random.Generator(np.random.PCG64(10))
    x = rng.random((8, 8))
    sigma = spd_stack(11, 36, 9)
    sigma2, beta = 0.05, 4.0
    state = InferenceState(estimate=x)
    z_prev = extract_patches(x, 3).patches
    j_prev = hqs_cost(x, z_prev, sigma, x, sigma2, beta, ridge=0)
    for _ in range(8):
        y_old = state.estimate
        state = hqs_layer(state, sigma, x, sigma2, beta, ridge_scale=0.0)
        z_new = state.layers[-1].z_rows
        j_half = hqs_cost(y_old, z_new, sigma, x, sigma2, beta, ridge=0)
        j_full = hqs_cost(state.estimate, z_new, sigma, x, sigma2, beta, ridge=0)
        assert j_half <= j_prev + 1e-10
        assert j_full <= j_half + 1e-10
        j_prev = j_full


# ------------------------------------------------------------- full forward

def test_forward_with_no_layers_is_identity():
    rng = np.random.Generator(np.random.PCG64(12))
    x = rng.random((7, 7))
    bank = random_bank(13, 3, 4)
    est, cache = dgcrf_forward(x, 0.01, bank, HQSSchedule(()))
    np.testing.assert_array_equal(est, x)
    assert cache.layers == []
    assert cache.betas.shape == (0,)


def test_forward_tracks_input_at_tiny_noise():
    rng = np.random.Generator(np.random.PCG64(14))
    x = rng.random((8, 8))
    bank = random_bank(15, 3, 4)
    est, _ = dgcrf_forward(x, 1e-8, bank, HQSSchedule.default(3))
    assert np.max(np.abs(est - x)) < 1e-4


def test_forward_shared_bank_equals_repeated_bank():
    rng = np.random.Generator(np.random.PCG64(16))
    x = rng.random((7, 7))
    bank = random_bank(17, 3, 4)
    a, _ = dgcrf_forward(x, 0.02, bank, HQSSchedule.default(2))
    b, _ = dgcrf_forward(x, 0.02, [bank, bank], HQSSchedule.default(2))
    np.testing.assert_array_equal(a, b)


def test_forward_cascade_controls_generator_reruns():
    rng = np.random.Generator(np.random.PCG64(18))
    x = rng.random((7, 7))
    bank = random_bank(19, 3, 4)
    _, on = dgcrf_forward(x, 0.02, bank, HQSSchedule.default(3), cascade=True)
    _, off = dgcrf_forward(x, 0.02, bank, HQSSchedule.default(3), cascade=False)
    assert all(layer.pg is not None for layer in on.layers)
    assert off.layers[0].pg is not None
    assert all(layer.pg is None for layer in off.layers[1:])


def test_forward_validation():
    bank = random_bank(20, 3, 4)
    with pytest.raises(ParameterError, match="banks"):
        dgcrf_forward(np.ones((6, 6)), 0.01, [bank, bank], HQSSchedule.default(3))
    with pytest.raises(ParameterError, match="smaller than patch side"):
        dgcrf_forward(np.ones((2, 6)), 0.01, bank, HQSSchedule.default(1))
    with pytest.raises(ParameterError, match="at least one"):
        dgcrf_forward(np.ones((6, 6)), 0.01, [], HQSSchedule.default(1))


# ----------------------------------------------------------- energy oracles

def test_energy_zero_for_identical_constant_images():
    x = np.full((5, 5), 0.3)
    stack = spd_stack(21, 16, 4)
    assert gcrf_energy(x, x, stack, sigma2=0.1) == 0.0


def test_energy_matches_naive_loop():
    rng = np.random.Generator(np.random.PCG64(22))
    x = rng.random((4, 4))
    y = rng.random((4, 4))
    stack = spd_stack(23, 9, 4)
    sigma2 = 0.07
    eps = prior_ridge(stack)
    got = gcrf_energy(y, x, stack, sigma2)
    want = np.sum((y - x) ** 2) / sigma2
    pset = extract_patches(y, 2)
    for p in range(9):
        gyp = pset.patches[p] - pset.patches[p].mean()
        want += gyp @ np.linalg.solve(stack[p] + eps[p] * np.eye(4), gyp)
    assert abs(got - want) < 1e-10 * max(1.0, abs(want))


def test_energy_data_term_scales_with_sigma2():
    rng = np.random.Generator(np.random.PCG64(24))
    x = rng.random((5, 5))
    y = rng.random((5, 5))
    stack = spd_stack(25, 16, 4)
    ss = float(np.sum((y - x) ** 2))
    e1 = gcrf_energy(y, x, stack, sigma2=0.1, ridge=0)
    e2 = gcrf_energy(y, x, stack, sigma2=0.2, ridge=0)
    assert abs((e1 - e2) - ss / 0.2) < 1e-9


def test_energy_validation():
    stack = spd_stack(26, 16, 4)
    with pytest.raises(ParameterError, match="shapes differ"):
        gcrf_energy(np.ones((5, 5)), np.ones((4, 4)), stack, sigma2=0.1)
    with pytest.raises(ParameterError, match="patch count"):
        gcrf_energy(np.ones((6, 6)), np.ones((6, 6)), stack, sigma2=0.1)


def test_split_cost_collapses_to_energy_without_gap():
    rng = np.random.Generator(np.random.PCG64(27))
    x = rng.random((5, 5))
    y = rng.random((5, 5))
    stack = spd_stack(28, 16, 4)
    z_rows = extract_patches(y, 2).patches
    j = hqs_cost(y, z_rows, stack, x, sigma2=0.1, beta=9.0)
    e = gcrf_energy(y, x, stack, sigma2=0.1)
    assert abs(j - e) < 1e-12 * max(1.0, abs(e))


def test_split_cost_validation():
    stack = spd_stack(29, 16, 4)
    with pytest.raises(ParameterError, match="auxiliary stack"):
        hqs_cost(np.ones((5, 5)), np.zeros((9, 4)), stack, np.ones((5, 5)), 0.1, 1.0)


def test_direct_oracle_single_patch_hand_assembly():
    rng = np.random.Generator(np.random.PCG64(30))
    x = rng.random((2, 2))
    sigma = random_spd(rng, 4)
    sigma2 = 0.05
    y = direct_solve_oracle(x, sigma[None], sigma2, ridge=0)
    g = mean_projection(2)
    c = g @ np.linalg.solve(sigma, g)
    h = np.eye(4) / sigma2 + 0.5 * (c + c.T)
    want = np.linalg.solve(h, x.ravel() / sigma2).reshape(2, 2)
    np.testing.assert_allclose(y, want, atol=1e-12)


def test_direct_oracle_ignores_weak_prior():
    rng = np.random.Generator(np.random.PCG64(31))
    x = rng.random((6, 6))
    stack = np.broadcast_to(1e9 * np.eye(9), (16, 9, 9)).copy()
    y = direct_solve_oracle(x, stack, sigma2=0.01, ridge=0)
    assert np.max(np.abs(y - x)) < 1e-6


def test_direct_oracle_minimizes_the_energy():
    rng = np.random.Generator(np.random.PCG64(32))
    x = rng.random((6, 6))
    stack = spd_stack(33, 16, 9)
    sigma2 = 0.03
    y = direct_solve_oracle(x, stack, sigma2)
    e_star = gcrf_energy(y, x, stack, sigma2)
    assert e_star <= gcrf_energy(x, x, stack, sigma2)
    for _ in range(10):
        bump = 1e-3 * rng.standard_normal((6, 6))
        assert e_star < gcrf_energy(y + bump, x, stack, sigma2)


def test_dense_oracles_guard_image_size():
    stack = np.broadcast_to(np.eye(9), (225, 9, 9)).copy()
    with pytest.raises(ParameterError, match="dense oracle"):
        direct_solve_oracle(np.ones((17, 17)), stack, sigma2=0.1)
    with pytest.raises(ParameterError, match="dense oracle"):
        hqs_joint_minimizer(np.ones((17, 17)), stack, sigma2=0.1, beta=1.0)


def test_joint_minimizer_is_a_fixed_point_of_both_half_steps():
    rng = np.random.Generator(np.random.PCG64(34))
    x = rng.random((6, 6))
    stack = spd_stack(35, 16, 9)
    sigma2, beta = 0.04, 3.0
    y_star, z_star = hqs_joint_minimizer(x, stack, sigma2, beta, ridge=0)

    # the optimal estimate reproduces itself from the optimal auxiliaries
    counts = coverage_counts(6, 6, 3).astype(np.float64)
    y_again = formation_from_rows(z_star, x, sigma2, beta, counts, 3)
    np.testing.assert_allclose(y_again, y_star, atol=1e-10)

    # and the optimal auxiliaries reproduce themselves from the estimate
    y_rows = extract_patches(y_star, 3).patches
    for p in range(16):
        np.testing.assert_allclose(
            patch_inference(y_rows[p], stack[p], beta), z_star[p], atol=1e-9
        )

    # no nearby point does better on the split objective
    j_star = hqs_cost(y_star, z_star, stack, x, sigma2, beta, ridge=0)
    for _ in range(10):
        dy = 1e-3 * rng.standard_normal((6, 6))
        dz = 1e-3 * rng.standard_normal(z_star.shape)
        assert j_star < hqs_cost(y_star + dy, z_star + dz, stack, x, sigma2, beta, ridge=0)

"""Training loss, parameter layout, pair synthesis, and the fitting loop."""

from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest

from dgcrf.errors import DataError, NumericError, ParameterError
from dgcrf.grad import BankGradients
from dgcrf.image import PSNR_CAP_DB
from dgcrf.train import (
    TrainConfig,
    build_training_pairs,
    evaluate,
    gradients_to_vector,
    init_banks,
    make_objective,
    n_parameters,
    pack_parameters,
    preflight_gradient_check,
    psnr_loss,
    random_init,
    train,
    unpack_parameters,
)
from helpers import make_clean_image, random_bank


def tiny_config(**overrides):
    base = dict(
        side=2,
        n_components=2,
        n_layers=1,
        sigma255_list=(25.0,),
        crop_size=8,
        max_iters=3,
        init_mode="random",
        em_iters=2,
        seed=0,
        preflight=True,
    )
    base.update(overrides)
    return TrainConfig(**base)


def tiny_images(n=6, size=16):
    return [make_clean_image(100 + i, size, size) for i in range(n)]


# -------------------------------------------------------------------- loss

def test_psnr_loss_known_value():
    target = np.zeros((4, 4))
    yhat = np.full((4, 4), 0.1)
    loss, dyhat, degenerate = psnr_loss(yhat, target)
    assert abs(loss - (-20.0)) < 1e-12
    assert not degenerate
    sq = 16 * 0.01
    np.testing.assert_allclose(dyhat, (20.0 / np.log(10.0)) * 0.1 / sq, rtol=1e-12)


def test_psnr_loss_log_law():
    rng = np.random.Generator(np.random.PCG64(0))
    target = rng.random((5, 5))
    diff = 0.01 * rng.standard_normal((5, 5))
    l1, _, _ = psnr_loss(target + diff, target)
    l2, _, _ = psnr_loss(target + 2 * diff, target)
    assert abs((l2 - l1) - 10.0 * np.log10(4.0)) < 1e-10


def test_psnr_loss_degenerate_pair():
    img = np.full((3, 3), 0.5)
    loss, dyhat, degenerate = psnr_loss(img, img.copy())
    assert loss == -PSNR_CAP_DB
    assert degenerate
    np.testing.assert_array_equal(dyhat, 0.0)


def test_psnr_loss_gradient_matches_finite_differences():
    rng = np.random.Generator(np.random.PCG64(1))
    target = rng.random((3, 3))
    yhat = rng.random((3, 3))
    _, dyhat, _ = psnr_loss(yhat, target)
    eps = 1e-7
    for i in range(3):
        for j in range(3):
            bumped = yhat.copy()
            bumped[i, j] += eps
            f_plus = psnr_loss(bumped, target)[0]
            bumped[i, j] -= 2 * eps
            f_minus = psnr_loss(bumped, target)[0]
            fd = (f_plus - f_minus) / (2 * eps)
            assert abs(dyhat[i, j] - fd) < 1e-6


def test_psnr_loss_shape_mismatch():
    with pytest.raises(ParameterError, match="shapes differ"):
        psnr_loss(np.zeros((2, 2)), np.zeros((3, 3)))


# ------------------------------------------------------------------- config

def test_config_validation_catches_each_field():
    cases = [
        (dict(side=1), "side"),
        (dict(n_components=0), "n_components"),
        (dict(n_layers=0), "n_layers"),
        (dict(n_layers=7), "beta multipliers"),
        (dict(sigma255_list=()), "sigma255_list"),
        (dict(sigma255_list=(-5.0,)), "positive"),
        (dict(c1=0.95), "c1"),
        (dict(max_iters=-1), "max_iters"),
        (dict(lbfgs_memory=0), "lbfgs_memory"),
        (dict(crop_size=1), "crop_size"),
        (dict(threads=0), "threads"),
        (dict(init_mode="kmeans"), "init_mode"),
        (dict(softmax_variant="relu"), "softmax_variant"),
        (dict(em_iters=-1), "em_iters"),
        (dict(ridge_scale=-1e-9), "ridge_scale"),
        (dict(beta_multipliers=(4.0, 1.0), n_layers=2), "non-decreasing"),
    ]
    for overrides, needle in cases:
        cfg = tiny_config(**overrides)
        with pytest.raises(ParameterError, match=needle):
            cfg.validate()


def test_config_schedule_and_bank_counts():
    cfg = tiny_config(n_layers=1)
    assert cfg.schedule().multipliers == (1.0,)
    assert cfg.n_factor_banks == 1 and cfg.n_bias_banks == 1
    cfg4 = TrainConfig(n_layers=4, share_bank=False, share_bias=False)
    assert cfg4.n_factor_banks == 4 and cfg4.n_bias_banks == 4


# --------------------------------------------------------------------- init

def test_random_init_scale_zero_is_the_identity_bank():
    bank = random_init(3, 2, seed=5, scale=0.0)
    np.testing.assert_array_equal(bank.factors_w, np.stack([np.eye(4)] * 3))
    np.testing.assert_array_equal(bank.factors_psi, np.stack([np.eye(4)] * 3))
    np.testing.assert_array_equal(bank.biases, 0.0)


def test_random_init_seeding_and_definiteness():
    a = random_init(4, 3, seed=7, scale=0.3)
    b = random_init(4, 3, seed=7, scale=0.3)
    c = random_init(4, 3, seed=8, scale=0.3)
    np.testing.assert_array_equal(a.factors_w, b.factors_w)
    assert not np.array_equal(a.factors_w, c.factors_w)
    assert np.min(np.linalg.eigvalsh(a.matrices_psi())) > 0
    with pytest.raises(ParameterError, match="scale"):
        random_init(2, 2, seed=0, scale=-0.1)


def test_gmm_init_mode_builds_one_bank():
    cfg = tiny_config(init_mode="gmm")
    banks = init_banks(tiny_images(3), cfg)
    assert len(banks) == 1
    assert banks[0].n_components == 2
    assert banks[0].side == 2


# ------------------------------------------------------------ packed layout

@pytest.mark.parametrize("share_bank", [True, False])
@pytest.mark.parametrize("share_bias", [True, False])
def test_pack_unpack_round_trip(share_bank, share_bias):
    cfg = tiny_config(n_layers=2, share_bank=share_bank, share_bias=share_bias)
    banks_in = [random_bank(40 + t, 2, 2) for t in range(1 if share_bank and share_bias else 2)]
    if share_bank and not share_bias:
        # shared factors require identical factor blocks across the list
        banks_in = [banks_in[0], banks_in[0]]
    theta = pack_parameters(banks_in, cfg)
    assert theta.shape == (n_parameters(cfg),)
    banks_out = unpack_parameters(theta, cfg)
    if share_bank and share_bias:
        assert len(banks_out) == 1
    else:
        assert len(banks_out) == cfg.n_layers
    for t, bank in enumerate(banks_out):
        src = banks_in[min(t, len(banks_in) - 1)]
        np.testing.assert_array_equal(
            bank.factors_w, banks_in[0].factors_w if share_bank else src.factors_w
        )
        np.testing.assert_array_equal(
            bank.biases, banks_in[0].biases if share_bias else src.biases
        )
    # the vector itself round-trips bitwise
    np.testing.assert_array_equal(pack_parameters(banks_out, cfg), theta)


def test_unpacked_shared_blocks_alias_one_array():
    cfg = tiny_config(n_layers=2, share_bank=False, share_bias=True)
    banks_in = [random_bank(50 + t, 2, 2) for t in range(2)]
    theta = pack_parameters(banks_in, cfg)
    out = unpack_parameters(theta, cfg)
    assert len(out) == 2
    assert np.shares_memory(out[0].biases, out[1].biases)
    assert not np.shares_memory(out[0].factors_w, out[1].factors_w)


def test_unpack_rejects_wrong_length():
    cfg = tiny_config()
    with pytest.raises(ParameterError, match="parameter vector"):
        unpack_parameters(np.zeros(n_parameters(cfg) + 1), cfg)


def test_pack_requires_per_layer_banks_when_unshared():
    cfg = tiny_config(n_layers=2, share_bank=False)
    with pytest.raises(ParameterError, match="expected 2 banks"):
        pack_parameters([random_bank(60, 2, 2)], cfg)


def test_gradient_vector_sums_shared_blocks():
    cfg = tiny_config(n_layers=2, share_bank=True, share_bias=True)
    m, kk = 4, 2
    rng = np.random.Generator(np.random.PCG64(2))
    d_fw = np.tril(rng.standard_normal((2, kk, m, m)))
    d_fp = np.tril(rng.standard_normal((2, kk, m, m)))
    d_b = rng.standard_normal((2, kk))
    grads = BankGradients(
        d_w=np.zeros((2, kk, m, m)),
        d_psi=np.zeros((2, kk, m, m)),
        d_biases=d_b,
        d_factors_w=d_fw,
        d_factors_psi=d_fp,
        dx=np.zeros((4, 4)),
    )
    vec = gradients_to_vector(grads, cfg)
    assert vec.shape == (n_parameters(cfg),)
    rows, cols = np.tril_indices(m)
    want = np.concatenate([
        d_fw.sum(axis=0)[:, rows, cols].ravel(),
        d_fp.sum(axis=0)[:, rows, cols].ravel(),
        d_b.sum(axis=0),
    ])
    np.testing.assert_array_equal(vec, want)


# ------------------------------------------------------------ training pairs

def test_pairs_are_deterministic_and_cycle_sigmas():
    cfg = tiny_config(sigma255_list=(15.0, 25.0))
    images = tiny_images(5)
    a = build_training_pairs(images, cfg)
    b = build_training_pairs(images, cfg)
    assert [p.sigma255 for p in a] == [15.0, 25.0, 15.0, 25.0, 15.0]
    for pa, pb in zip(a, b):
        np.testing.assert_array_equal(pa.clean, pb.clean)
        np.testing.assert_array_equal(pa.noisy, pb.noisy)
        assert pa.clean.shape == (8, 8)
        assert not np.array_equal(pa.clean, pa.noisy)


def test_pairs_reject_undersized_or_invalid_images():
    cfg = tiny_config(crop_size=32)
    with pytest.raises(DataError, match="smaller than crop_size"):
        build_training_pairs([np.ones((16, 16)) * 0.5], cfg)
    cfg_small = tiny_config()
    with pytest.raises(ParameterError, match="training image 0"):
        build_training_pairs([np.full((16, 16), np.nan)], cfg_small)


# ---------------------------------------------------- objective and preflight

def test_objective_pool_matches_serial_bitwise():
    cfg = tiny_config(threads=1)
    pairs = build_training_pairs(tiny_images(4), cfg)
    banks = init_banks([p.clean for p in pairs], cfg)
    theta = pack_parameters(banks, cfg)
    serial = make_objective(pairs, cfg)
    f1, g1 = serial(theta)
    with ProcessPoolExecutor(max_workers=2) as pool:
        parallel = make_objective(pairs, cfg, pool=pool)
        f2, g2 = parallel(theta)
    assert f1 == f2
    np.testing.assert_array_equal(g1, g2)


def test_preflight_accepts_a_true_gradient_and_rejects_a_scaled_one():
    rng = np.random.Generator(np.random.PCG64(3))
    h = np.diag(rng.uniform(0.5, 2.0, size=6))

    def good(theta):
        return 0.5 * float(theta @ h @ theta), h @ theta

    def bad(theta):
        return 0.5 * float(theta @ h @ theta), 1.5 * (h @ theta)

    theta0 = rng.standard_normal(6)
    reports = preflight_gradient_check(good, theta0, seed=0)
    assert len(reports) == 2
    assert all(r[2] < 1e-6 for r in reports)
    with pytest.raises(NumericError, match="preflight failed"):
        preflight_gradient_check(bad, theta0, seed=0)


# ------------------------------------------------------------- the full loop

def test_train_with_zero_iterations_returns_the_init():
    cfg = tiny_config(max_iters=0, preflight=False)
    images = tiny_images(3)
    start = [random_init(2, 2, seed=9, scale=0.05)]
    out = train(images, cfg, start_banks=start)
    assert "max_iters=0" in out.result.message
    np.testing.assert_array_equal(out.banks[0].factors_w, start[0].factors_w)
    np.testing.assert_array_equal(out.banks[0].biases, start[0].biases)


def test_train_improves_the_objective_and_logs_the_run():
    cfg = tiny_config()
    streamed = []
    out = train(tiny_images(), cfg, log_fn=streamed.append)
    assert out.result.value <= out.result.trace[0].value
    assert out.log_lines == streamed
    assert out.log_lines[0].startswith("# gradient preflight")
    assert any(line.startswith("iter    0") for line in out.log_lines)
    assert out.log_lines[-1].startswith("# ")
    assert out.log_text.endswith("\n")


def test_train_is_deterministic_per_config():
    cfg = tiny_config(max_iters=2)
    a = train(tiny_images(), cfg)
    b = train(tiny_images(), cfg)
    np.testing.assert_array_equal(a.result.params, b.result.params)
    # log lines match except for wall-clock fields
    strip = lambda line: line.split("  time")[0]
    assert [strip(l) for l in a.log_lines] == [strip(l) for l in b.log_lines]


def test_train_requires_images():
    with pytest.raises(DataError, match="no training images"):
        train([], tiny_config())


# ---------------------------------------------------------------- evaluation

def test_evaluate_rows_per_sigma_and_zero_sigma_floor():
    cfg = tiny_config()
    banks = [random_init(2, 2, seed=11, scale=0.05)]
    images = tiny_images(2)
    rows = evaluate(banks, images, [0.0, 25.0], cfg)
    assert [r.sigma255 for r in rows] == [0.0, 25.0]
    assert rows[0].input_psnr == PSNR_CAP_DB
    assert np.isfinite(rows[0].output_psnr)
    assert rows[1].input_psnr < PSNR_CAP_DB


def test_evaluate_is_seeded_and_thread_count_invariant():
    cfg1 = tiny_config(threads=1)
    cfg2 = tiny_config(threads=2)
    banks = [random_init(2, 2, seed=12, scale=0.05)]
    images = tiny_images(2)
    a = evaluate(banks, images, [15.0, 25.0], cfg1)
    b = evaluate(banks, images, [15.0, 25.0], cfg1)
    c = evaluate(banks, images, [15.0, 25.0], cfg2)
    assert a == b == c
    shifted = evaluate(banks, images, [15.0, 25.0], cfg1, seed=99)
    assert shifted[0].input_psnr != a[0].input_psnr


def test_evaluate_requires_images():
    with pytest.raises(DataError, match="no evaluation images"):
        evaluate([random_init(2, 2, seed=1)], [], [25.0], tiny_config())

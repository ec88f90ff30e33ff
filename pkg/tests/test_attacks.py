"""Hand-designed attacks: sign/projection conventions, line search on
hand-evaluated toy losses, feasibility, determinism."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advopt.attacks import (AttackConfig, AttackFamily, BLSConfig, armijo_accepts, bls_core,
                            bls_search, cw_inf_attack, fgsm_attack, pgd_attack, pgd_bls_core,
                            pgd_core, project, run_attack, sign)
from advopt.errors import ConfigError, ShapeMismatchError
from advopt.models import CrossEntropy, forward, predict

from conftest import make_weights


# ---------------------------------------------------------------------------
# sign and projection
# ---------------------------------------------------------------------------


def test_sign_convention():
    assert sign(np.array(0.0)) == 1.0
    assert sign(np.array(-2.5)) == -1.0
    assert list(sign(np.array([3.0, -0.0]))) == [1.0, 1.0]


@given(st.floats(-10, 10, allow_nan=False))
def test_sign_is_plus_minus_one(v):
    assert sign(np.array(v)) in (-1.0, 1.0)


def test_project_hand_values():
    x = np.array([0.5])
    assert project(x, np.array([0.9]), 0.3)[0] == pytest.approx(0.8)
    assert project(x, np.array([0.5]), 0.3)[0] == pytest.approx(0.5)
    # ball gives -0.2, pixel range clamps to 0
    assert project(np.array([0.1]), np.array([-0.5]), 0.3)[0] == pytest.approx(0.0)


def test_project_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        project(np.zeros(3), np.zeros(4), 0.1)


@settings(max_examples=50, deadline=None)
@given(
    x=st.lists(st.floats(0, 1), min_size=1, max_size=8),
    d=st.lists(st.floats(-3, 3, allow_nan=False), min_size=1, max_size=8),
    eps=st.floats(0.01, 1.0),
)
def test_project_feasibility_property(x, d, eps):
    n = min(len(x), len(d))
    xr = np.array(x[:n])
    xp = xr + np.array(d[:n])
    out = project(xr, xp, eps)
    assert np.abs(out - xr).max() <= eps + 1e-12
    assert out.min() >= 0.0 and out.max() <= 1.0


# ---------------------------------------------------------------------------
# toy-loss cores (hand-evaluated)
# ---------------------------------------------------------------------------


def linear_loss(z):
    return float(z.sum())


def linear_grad(z):
    return float(z.sum()), np.ones_like(z)


def concave_loss(z):
    # f(z) = z - z^2, maximum at 1/2
    return float((z - z * z).sum())


def concave_grad(z):
    return concave_loss(z), 1.0 - 2.0 * z


def test_pgd_single_step_hand_value():
    cfg = AttackConfig(epsilon=0.3, steps=1, family=AttackFamily.PGD, step_size=0.075,
                       gaussian_init=False)
    res = pgd_core(linear_grad, linear_loss, np.array([0.5]), cfg, seed=0)
    assert res.x_adv[0] == pytest.approx(0.575)
    assert len(res.step_losses) == 1


def test_pgd_saturates_with_large_step():
    cfg = AttackConfig(epsilon=0.3, steps=4, family=AttackFamily.PGD, step_size=0.7,
                       gaussian_init=False)
    res = pgd_core(linear_grad, linear_loss, np.array([0.5]), cfg, seed=0)
    # positive gradient: saturate at the upper ball face from step 1 onward
    assert res.x_adv[0] == pytest.approx(0.8)
    assert res.step_losses == pytest.approx([0.8] * 4)


def test_armijo_hand_values():
    # linear loss accepts any step
    assert armijo_accepts(1.0, 0.0, 1.0, np.array([1.0]), 1e-4)
    # f(z) = z - z^2 at 0 with p = 1: step 1 gives trial loss 0 < 1e-4
    assert not armijo_accepts(0.0, 0.0, 1.0, np.array([1.0]), 1e-4)
    # step 0.5 gives 0.25 >= 5e-5
    assert armijo_accepts(0.25, 0.0, 0.5, np.array([1.0]), 1e-4)


def test_bls_core_backtracks_once_on_concave_toy():
    loss0, p = concave_grad(np.array([0.0]))
    alpha, ok = bls_core(concave_loss, np.array([0.0]), p, loss0,
                         BLSConfig(alpha0=1.0, rho=0.5, c=1e-4))
    assert ok and alpha == pytest.approx(0.5)


def test_bls_core_accepts_immediately_on_linear_toy():
    loss0, p = linear_grad(np.array([0.0]))
    alpha, ok = bls_core(linear_loss, np.array([0.0]), p, loss0, BLSConfig(alpha0=1.0))
    assert ok and alpha == pytest.approx(1.0)


def test_bls_trial_sequence_and_warning():
    # impossible test: constant loss never satisfies sufficient increase
    trials = []

    def flat_loss(z):
        trials.append(float(z[0]))
        return 0.0

    p = np.array([1.0])
    alpha, ok = bls_core(flat_loss, np.array([0.0]), p, 0.0,
                         BLSConfig(alpha0=1.0, rho=0.5, c=1e-4, max_backtracks=4))
    assert not ok
    assert alpha == pytest.approx(1.0 * 0.5**4)
    assert trials == pytest.approx([1.0, 0.5, 0.25, 0.125])  # strictly shrinking by rho


def test_bls_defaults_match_convention():
    cfg = BLSConfig(alpha0=0.3)
    assert cfg.rho == 0.5 and cfg.c == 1e-4


def test_bls_config_validation():
    with pytest.raises(ConfigError):
        BLSConfig(alpha0=0.1, rho=1.5)
    with pytest.raises(ConfigError):
        BLSConfig(alpha0=-1.0)
    with pytest.raises(ConfigError):
        BLSConfig(alpha0=0.1, c=0.0)


def test_pgd_bls_core_uses_accepted_step_with_sign_direction():
    # gradient is +1 everywhere, so sign direction == gradient direction;
    # linear loss accepts alpha0 right away
    cfg = AttackConfig(epsilon=0.5, steps=1, family=AttackFamily.PGD_BLS, gaussian_init=False)
    res = pgd_bls_core(linear_grad, linear_loss, np.array([0.2]), cfg,
                       BLSConfig(alpha0=0.5), seed=0)
    assert res.x_adv[0] == pytest.approx(0.7)
    assert res.bls_warnings == 0


def test_attack_config_validation():
    with pytest.raises(ConfigError):
        AttackConfig(epsilon=0.0, steps=1, family=AttackFamily.PGD)
    with pytest.raises(ConfigError):
        AttackConfig(epsilon=0.1, steps=-1, family=AttackFamily.PGD)
    cfg = AttackConfig(epsilon=0.4, steps=3, family="pgd")
    assert cfg.family is AttackFamily.PGD
    assert cfg.alpha == pytest.approx(0.1)


# ---------------------------------------------------------------------------
# model-backed attacks
# ---------------------------------------------------------------------------


@pytest.fixture
def small_model(tiny_conv_spec):
    return make_weights(tiny_conv_spec, seed=31)


@pytest.fixture
def small_batch():
    rng = np.random.default_rng(6)
    return rng.uniform(0.2, 0.8, (4, 1, 8, 8)), rng.integers(0, 3, 4).astype(np.int64)


def test_pgd_attack_feasible_and_raises_loss(small_model, small_batch):
    x, y = small_batch
    cfg = AttackConfig(epsilon=0.3, steps=5, family=AttackFamily.PGD)
    res = pgd_attack(small_model, x, CrossEntropy(y), cfg, seed=1)
    assert np.abs(res.x_adv - x).max() <= 0.3 + 1e-12
    assert res.x_adv.min() >= 0.0 and res.x_adv.max() <= 1.0
    assert res.step_losses[-1] >= res.initial_loss


def test_bls_search_on_model(small_model, small_batch):
    x, _ = small_batch
    y = np.array([0, 1, 2, 0])
    alpha, ok = bls_search(small_model, x, CrossEntropy(y), BLSConfig(alpha0=0.3))
    assert alpha > 0


def test_every_family_feasible(small_model, small_batch):
    x, y = small_batch
    for family in AttackFamily:
        cfg = AttackConfig(epsilon=0.25, steps=3, family=family)
        kwargs = {}
        if family == AttackFamily.LEARNED:
            from advopt.learned import init_rnn_params

            kwargs["rnn_params"] = init_rnn_params(4, seed=0)
        res = run_attack(small_model, x, y, cfg, seed=2, **kwargs)
        assert np.abs(res.x_adv - x).max() <= 0.25 + 1e-12, family
        assert res.x_adv.min() >= 0.0 and res.x_adv.max() <= 1.0, family


def test_attacks_deterministic(small_model, small_batch):
    x, y = small_batch
    for family in (AttackFamily.PGD, AttackFamily.PGD_BLS, AttackFamily.CW_INF):
        cfg = AttackConfig(epsilon=0.3, steps=3, family=family)
        r1 = run_attack(small_model, x, y, cfg, seed=7)
        r2 = run_attack(small_model, x, y, cfg, seed=7)
        assert np.array_equal(r1.x_adv, r2.x_adv), family
        assert r1.step_losses == r2.step_losses, family


def test_zero_steps_returns_initial_point(small_model, small_batch):
    x, y = small_batch
    cfg = AttackConfig(epsilon=0.3, steps=0, family=AttackFamily.CW_INF, gaussian_init=True)
    res = cw_inf_attack(small_model, x, y, cfg, seed=3)
    assert np.array_equal(res.x_adv, res.initial_input)
    cfg2 = AttackConfig(epsilon=0.3, steps=0, family=AttackFamily.PGD, gaussian_init=False)
    res2 = pgd_attack(small_model, x, CrossEntropy(y), cfg2, seed=3)
    assert np.array_equal(res2.x_adv, x)


def test_cw_keeps_misclassified_points_misclassified(small_model, small_batch):
    x, _ = small_batch
    pred = predict(small_model, x)
    wrong = (pred + 1) % 3  # label everything incorrectly
    cfg = AttackConfig(epsilon=0.3, steps=4, family=AttackFamily.CW_INF, gaussian_init=False)
    res = cw_inf_attack(small_model, x, wrong, cfg, seed=0)
    # the margin objective is flat at misclassified points: nothing moves
    assert np.array_equal(predict(small_model, res.x_adv), pred)
    # and the clamped margin objective value is >= 0 (negated margin <= 0 flipped)
    assert all(l == pytest.approx(res.step_losses[0]) for l in res.step_losses)


def test_cw_reduces_margin_on_correct_points(small_model):
    rng = np.random.default_rng(9)
    x = rng.uniform(0.3, 0.7, (8, 1, 8, 8))
    y = predict(small_model, x)  # all correct by construction
    cfg = AttackConfig(epsilon=0.5, steps=10, family=AttackFamily.CW_INF)
    res = cw_inf_attack(small_model, x, y, cfg, seed=1)
    assert res.step_losses[-1] > res.initial_loss  # negated margin increased


def test_fgsm_is_single_full_step(small_model, small_batch):
    x, y = small_batch
    cfg = AttackConfig(epsilon=0.2, steps=5, family=AttackFamily.FGSM, gaussian_init=False)
    res = fgsm_attack(small_model, x, CrossEntropy(y), cfg, seed=0)
    assert len(res.step_losses) == 1
    moved = np.abs(res.x_adv - x)
    interior = (x > 0.2) & (x < 0.8)
    assert moved[interior] == pytest.approx(0.2)


def test_learned_attack_requires_params(small_model, small_batch):
    x, y = small_batch
    cfg = AttackConfig(epsilon=0.3, steps=2, family=AttackFamily.LEARNED)
    with pytest.raises(ConfigError):
        run_attack(small_model, x, y, cfg, seed=0)

import numpy as np
import pytest

from fgsmlab import autodiff as ad
from fgsmlab.attacks import AttackConfig, fast_fgsm, fgsm, input_gradient, pgd, pgd_eval_config, run_attack
from fgsmlab.nn import ConfigError
from helpers import X_LIN, Y_LIN, tiny_model

EPS = 8 / 255


def _batch(seed, n=4, dtype=np.float64):
    rng = np.random.default_rng(seed)
    return rng.uniform(size=(n, 3, 8, 8)).astype(dtype), rng.integers(0, 3, size=n)


def _losses(model, x, y):
    with ad.no_grad():
        return ad.cross_entropy(model.forward(x), y, reduction="none").data


def test_epsilon_zero_gives_zero(model64):
    x, y = _batch(0)
    assert np.array_equal(fgsm(model64, x, y, 0.0), np.zeros_like(x))


def test_linear_model_closed_form(linear_model):
    # grad_x CE = W^T (softmax(Wx+b) - e_y), worked out by hand for these inputs
    g, _ = input_gradient(linear_model, X_LIN, Y_LIN, train_mode=False)
    np.testing.assert_allclose(g, [[-1.2944944535906426, 2.624684288958406, 1.9611661562102423],
                                   [0.03288059008999264, -0.5045343270609544, 2.358451324362009]], rtol=1e-12)
    delta = fgsm(linear_model, X_LIN, Y_LIN, 0.1)
    np.testing.assert_array_equal(delta, 0.1 * np.array([[-1, 1, 1], [1, -1, 1]]))


@pytest.mark.parametrize("seed", range(5))
def test_fgsm_equals_pgd_one_step(model64, seed):
    x, y = _batch(seed)
    for clamp in (False, True):
        a = fgsm(model64, x, y, EPS, train_mode=False, clamp_pixel_box=clamp)
        b = pgd(model64, x, y, EPS, EPS, 1, 1, "zero", clamp, train_mode=False)
        assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("family", ["fgsm", "pgd", "fast_fgsm"])
def test_ball_and_box(model64, family):
    cfg = AttackConfig(family, EPS, steps=3, restarts=2, init="uniform_random" if family != "fgsm" else "zero")
    rng = np.random.default_rng(0)
    for seed in range(5):
        x, y = _batch(seed)
        x[0, 0, 0, :4] = [0.0, 1.0, 0.001, 0.999]
        d = run_attack(model64, x, y, cfg, rng)
        assert np.max(np.abs(d)) <= EPS
        assert (x + d).min() >= 0.0 and (x + d).max() <= 1.0


def test_pgd10_at_least_as_strong_as_fgsm():
    model = tiny_model(2)
    x, y = _batch(11, n=64)
    l_fgsm = _losses(model, x + fgsm(model, x, y, EPS, False, True), y)
    l_pgd = _losses(model, x + pgd(model, x, y, EPS, 2 / 255, 10, rng=np.random.default_rng(0)), y)
    assert np.mean(l_pgd >= l_fgsm - 1e-12) >= 0.95


def test_restarts_monotone(model64):
    x, y = _batch(3, n=8)
    prev = None
    for r in (1, 2, 4):
        d = pgd(model64, x, y, EPS, 2 / 255, 3, restarts=r, rng=np.random.default_rng(9))
        cur = _losses(model64, x + d, y)
        if prev is not None:
            assert np.all(cur >= prev)
        prev = cur


def test_fast_fgsm_zero_noise_is_fgsm(model64):
    x, y = _batch(1)
    a = fgsm(model64, x, y, EPS, train_mode=False, clamp_pixel_box=True)
    b = fast_fgsm(model64, x, y, EPS, EPS, np.zeros_like(x), train_mode=False)
    assert a.tobytes() == b.tobytes()


def test_fast_fgsm_rejects_noise_outside_ball(model64):
    x, y = _batch(1)
    with pytest.raises(ValueError):
        fast_fgsm(model64, x, y, EPS, EPS, np.full_like(x, 2 * EPS))


def test_fast_fgsm_default_step():
    assert AttackConfig("fast_fgsm", EPS).resolved_step() == pytest.approx(1.25 * EPS)


def test_attack_output_has_no_graph(model64):
    x, y = _batch(0)
    d = fgsm(model64, x, y, EPS)
    assert isinstance(d, np.ndarray)


def test_pgd_eval_defaults():
    c = pgd_eval_config()
    assert (c.family, c.steps, c.restarts, c.step_size, c.init) == ("pgd", 50, 10, 2 / 255, "uniform_random")


@pytest.mark.parametrize("kw", [dict(family="cw"), dict(epsilon=-1.0), dict(family="pgd", steps=0),
                                dict(restarts=0), dict(init="gauss")])
def test_invalid_attack_config(kw):
    with pytest.raises(ConfigError):
        AttackConfig(**kw).validate()


def test_attack_config_round_trip():
    c = AttackConfig("pgd", 0.1, 0.01, 5, 2, "uniform_random", False)
    assert AttackConfig.from_dict(c.to_dict()) == c

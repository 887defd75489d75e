import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bamguard import tensor as T
from bamguard.attack import (EPSILON_GRID, AttackConfig, AttackError, attack_success, pgd_attack,
                             project)
from bamguard.policy import ActionDistribution, ArchitectureConfig, PolicyNetwork


@pytest.fixture(scope="module")
def net():
    net = PolicyNetwork(ArchitectureConfig(), seed=2)
    rng = np.random.default_rng(9)
    for p in net.parameters():
        p.data = (0.3 * rng.standard_normal(p.shape)).astype(p.dtype)
    return net


def test_zero_radius_returns_input(net, rng):
    s = rng.random((2, 4, 32, 32))
    adv = pgd_attack(net, s, AttackConfig(epsilon=0.0))
    assert adv.s_adv.tobytes() == s.tobytes()
    assert adv.linf == 0.0


def test_surrogate_sum_objective():
    eps = 0.1
    x0 = np.full((3, 4), 0.5)
    cfg = AttackConfig(epsilon=eps, step_size=eps, iterations=1)
    adv = pgd_attack(None, x0, cfg, objective=lambda x: T.sum_(x))
    np.testing.assert_allclose(adv.s_adv, 0.5 + eps, rtol=0, atol=1e-15)


def test_box_clamp_at_one():
    s = np.array([[1.0, 0.97, 0.2]])
    adv = pgd_attack(None, s, AttackConfig(epsilon=0.1, iterations=3), objective=lambda x: T.sum_(x))
    assert adv.s_adv[0, 0] == 1.0
    assert adv.s_adv[0, 1] == 1.0
    assert adv.s_adv[0, 2] == pytest.approx(0.3)


def test_default_step_size():
    assert AttackConfig(epsilon=0.1, iterations=10).alpha == pytest.approx(0.025)


@pytest.mark.parametrize("kwargs", [dict(epsilon=-0.1), dict(iterations=-1), dict(step_size=0.0),
                                    dict(loss_kind="cw")])
def test_config_errors(kwargs):
    with pytest.raises(ValueError):
        AttackConfig(**kwargs)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_gradient_aborts():
    with pytest.raises(AttackError, match="non-finite"):
        pgd_attack(None, np.full(3, 0.5), AttackConfig(epsilon=0.1),
                   objective=lambda x: T.sum_(T.log(T.scale(x, -1.0))))


def test_attack_raises_loss(net, rng):
    s = rng.random((4, 4, 32, 32))
    adv = pgd_attack(net, s, AttackConfig(epsilon=0.1))
    assert adv.loss_trace[-1] > adv.loss_trace[0]


def test_deterministic(net, rng):
    s = rng.random((2, 4, 32, 32))
    a = pgd_attack(net, s, AttackConfig(epsilon=0.05)).s_adv
    b = pgd_attack(net, s, AttackConfig(epsilon=0.05)).s_adv
    assert a.tobytes() == b.tobytes()


def test_random_start_stays_feasible(net, rng):
    s = rng.random((2, 4, 32, 32))
    adv = pgd_attack(net, s, AttackConfig(epsilon=0.05, random_start=True), rng=np.random.default_rng(0))
    assert np.abs(adv.s_adv - s).max() <= 0.05 + 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(EPSILON_GRID))
def test_feasibility(net, seed, eps):
    r = np.random.default_rng(seed)
    s = r.random((1, 4, 32, 32))
    s[r.random(s.shape) < 0.1] = 1.0
    s[r.random(s.shape) < 0.1] = 0.0
    adv = pgd_attack(net, s, AttackConfig(epsilon=eps, iterations=3))
    assert np.abs(adv.s_adv - s).max() <= eps + 1e-6
    assert adv.s_adv.min() >= 0 and adv.s_adv.max() <= 1


def test_monotone_containment(net, rng):
    s = rng.random((2, 4, 32, 32))
    small = pgd_attack(net, s, AttackConfig(epsilon=0.01)).s_adv
    # an eps1-feasible point is a fixed point of the eps2 projection
    for eps2 in (0.01, 0.05, 0.1, 0.5):
        assert np.array_equal(project(small, s, eps2), small)


class TestSuccess:
    def test_identical(self):
        d = ActionDistribution.from_logits(np.log([0.2, 0.5, 0.3]))
        assert attack_success(d, d) is False

    def test_switch(self):
        a = ActionDistribution.from_logits(np.log([0.6, 0.3, 0.1]))
        b = ActionDistribution.from_logits(np.log([0.1, 0.3, 0.6]))
        assert attack_success(a, b) is True

    def test_ties(self):
        a = ActionDistribution.from_logits(np.log([0.4, 0.4, 0.2]))
        assert attack_success(a, ActionDistribution.from_logits(np.log([0.4, 0.4, 0.2]))) is False

    def test_batched(self):
        a = ActionDistribution.from_logits(np.log([[0.6, 0.4], [0.3, 0.7]]))
        b = ActionDistribution.from_logits(np.log([[0.6, 0.4], [0.8, 0.2]]))
        assert attack_success(a, b).tolist() == [False, True]

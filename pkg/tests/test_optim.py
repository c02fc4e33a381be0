import numpy as np
import pytest

from driftguard.optim import SGD, Adam, NumericalError


def test_sgd_update_rule():
    p = np.array([1.0])
    SGD(0.1).step(p, np.array([2.0]))
    assert p[0] == pytest.approx(0.8)


def test_sgd_zero_grad_is_noop():
    p = np.array([1.0, -2.0])
    SGD(0.1).step(p, np.zeros(2))
    assert p.tolist() == [1.0, -2.0]


def test_adam_first_step_is_lr_sized():
    p = np.array([0.0, 0.0, 0.0])
    Adam(1e-3).step(p, np.array([5.0, -0.01, 1e4]))
    np.testing.assert_allclose(np.abs(p), 1e-3, rtol=1e-5)
    assert p[0] < 0 < p[1]


def test_adam_zero_grad_only_decays_moments():
    opt = Adam(1e-3)
    p = np.array([1.0])
    opt.step(p, np.array([1.0]))
    m = opt.m.copy()
    opt.step(p, np.array([0.0]))
    np.testing.assert_allclose(opt.m, 0.9 * m)
    assert opt.t == 2


def test_reset_matches_fresh_optimizer():
    used = Adam(1e-2)
    p = np.array([1.0, 2.0])
    for g in ([1.0, 1.0], [0.5, -3.0]):
        used.step(p, np.array(g))
    used.reset()
    used.reset()  # idempotent
    a, b = np.array([0.3, 0.4]), np.array([0.3, 0.4])
    used.step(a, np.array([0.2, -0.1]))
    Adam(1e-2).step(b, np.array([0.2, -0.1]))
    assert a.tobytes() == b.tobytes()


def test_sgd_reset_is_stateless():
    opt = SGD(0.5)
    a, b = np.array([1.0]), np.array([1.0])
    opt.step(a, np.array([1.0]))
    opt.reset()
    opt.step(a, np.array([1.0]))
    SGD(0.5).step(b, np.array([1.0]))
    SGD(0.5).step(b, np.array([1.0]))
    assert a.tolist() == b.tolist()


def test_non_finite_gradient_names_index():
    with pytest.raises(NumericalError, match="index 2"):
        SGD(0.1).step(np.zeros(3), np.array([0.0, 1.0, np.nan]))


def test_adam_converges_on_quadratic():
    target = np.array([3.0, -1.0, 0.5])
    p = np.zeros(3)
    opt = Adam(0.05)
    for _ in range(2000):
        opt.step(p, 2 * (p - target))
    np.testing.assert_allclose(p, target, atol=1e-3)

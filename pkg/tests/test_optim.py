import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from medistill.autodiff import parameter
from medistill.optim import AdamW, OptimConfig, clip_grad_norm, decays, learning_rate


def test_three_adamw_steps_match_hand_reference():
    cfg = OptimConfig(lr=0.1, weight_decay=0.02, warmup_steps=0, clip_norm=None)
    w = parameter(np.array([[1.5]]))
    opt = AdamW([("w", w)], cfg)
    grads = [0.5, -0.2, 0.3]
    # hand-rolled scalar trajectory
    x, m, v = 1.5, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x * (1 - 0.1 * 0.02)
        x = x - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        w.grad = np.array([[g]])
        opt.step(0.1)
        assert w.data[0, 0] == pytest.approx(x, abs=1e-15)


def test_first_step_moves_by_lr_regardless_of_gradient_scale():
    for g in (1e-3, 1.0, 1e3):
        w = parameter(np.array([0.0]))
        opt = AdamW([("b", w)], OptimConfig(weight_decay=0.0))
        w.grad = np.array([g])
        opt.step(0.01)
        assert w.data[0] == pytest.approx(-0.01, rel=1e-4)


def test_weight_decay_is_decoupled_and_matrix_only():
    assert decays("text.layers.0.self.q.weight", parameter(np.ones((2, 2))))
    assert not decays("text.layers.0.self.q.bias", parameter(np.ones(2)))
    assert not decays("itc.temp", parameter(np.ones(())))
    w, b = parameter(np.full((2, 2), 2.0)), parameter(np.full(2, 2.0))
    opt = AdamW([("w", w), ("b", b)], OptimConfig(weight_decay=0.5))
    w.grad, b.grad = np.zeros((2, 2)), np.zeros(2)
    opt.step(0.1)
    np.testing.assert_allclose(w.data, 2.0 * (1 - 0.1 * 0.5))
    np.testing.assert_allclose(b.data, 2.0)


def test_schedule_closed_form():
    cfg = OptimConfig(lr=5e-4, warmup_steps=100, decay_every=200, decay_rate=0.85)
    assert learning_rate(0, cfg) == pytest.approx(5e-6)
    assert learning_rate(49, cfg) == pytest.approx(2.5e-4)
    assert learning_rate(99, cfg) == pytest.approx(5e-4)
    assert learning_rate(199, cfg) == pytest.approx(5e-4)
    for epoch in range(1, 10):
        assert learning_rate(200 * epoch, cfg) == 5e-4 * 0.85 ** epoch
        assert learning_rate(200 * epoch + 199, cfg) == 5e-4 * 0.85 ** epoch


@settings(max_examples=50, deadline=None)
@given(step=st.integers(0, 5000), warmup=st.integers(0, 300))
def test_schedule_is_bounded_and_warmup_monotone(step, warmup):
    cfg = OptimConfig(warmup_steps=warmup)
    lr = learning_rate(step, cfg)
    assert 0 < lr <= cfg.lr
    if step + 1 < warmup and step // cfg.decay_every == (step + 1) // cfg.decay_every:
        assert learning_rate(step + 1, cfg) > lr


def test_clip_grad_norm_scales_to_bound():
    a, b = parameter(np.zeros(2)), parameter(np.zeros(1))
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    total = np.sqrt((a.grad ** 2).sum() + (b.grad ** 2).sum())
    assert total == pytest.approx(1.0, rel=1e-5)
    a.grad = np.array([0.3, 0.4])
    b.grad = None
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(0.5)
    np.testing.assert_array_equal(a.grad, [0.3, 0.4])


def test_state_dict_round_trip_continues_identically():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=(6, 3))
    w1 = parameter(np.ones(3))
    opt1 = AdamW([("w", w1)], OptimConfig())
    for g in grads[:3]:
        w1.grad = g.copy()
        opt1.step(0.01)
    w2 = parameter(w1.data.copy())
    opt2 = AdamW([("w", w2)], OptimConfig())
    opt2.load_state_dict(opt1.state_dict())
    for g in grads[3:]:
        for w, opt in ((w1, opt1), (w2, opt2)):
            w.grad = g.copy()
            opt.step(0.01)
    np.testing.assert_array_equal(w1.data, w2.data)

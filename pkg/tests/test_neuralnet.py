import numpy as np
import pytest

from cso_debias import neuralnet as nn
from cso_debias.rng import RngStream


SMALL = nn.NetSpec((1, 3, 2, 1))


def test_param_count_matches_layout():
    # (1+1)*3 + (3+1)*2 + (2+1)*1 = 6 + 8 + 3
    assert nn.param_count(SMALL) == 17
    assert nn.param_count(nn.NetSpec((1, 40, 40, 1))) == 2 * 40 + 40 * 41 + 41


def test_spec_validation():
    with pytest.raises(ValueError):
        nn.NetSpec((1, 1))
    with pytest.raises(ValueError):
        nn.NetSpec((1, 0, 1))


def test_zero_weights_give_zero_output():
    w = np.zeros(nn.param_count(SMALL))
    assert nn.forward(SMALL, w, 1.7) == 0.0


def test_hand_computed_single_path():
    # width-1 hidden chain: y = w3 * tanh(w2 * tanh(w1 t + b1) + b2) + b3
    spec = nn.NetSpec((1, 1, 1))
    w = np.array([0.7, -0.2, 1.3, 0.5])  # w1, b1, w2, b2
    t = 0.9
    expected = 1.3 * np.tanh(0.7 * t - 0.2) + 0.5
    assert nn.forward(spec, w, t) == pytest.approx(expected, rel=1e-12)


def test_forward_is_continuous():
    rng = RngStream(3, 0)
    w = nn.init_weights(SMALL, rng)
    gen = RngStream(3, 1).generator
    for t in gen.uniform(-5, 5, size=10):
        assert abs(nn.forward(SMALL, w, t) - nn.forward(SMALL, w, t + 1e-8)) <= 1e-6


def test_loss_zero_at_interpolating_point():
    # zero weights, amplitude 1, phase 0, dataset {0}: target sin(0)=0
    w = np.zeros(nn.param_count(SMALL))
    loss, grad = nn.loss_and_grad(SMALL, w, np.array([0.0]), 1.0, 0.0)
    assert loss == 0.0
    np.testing.assert_array_equal(grad, np.zeros_like(w))


def test_small_amplitude_loss_positive():
    w = np.zeros(nn.param_count(SMALL))
    loss, _ = nn.loss_and_grad(SMALL, w, np.array([1.0, 2.0]), 0.1, 0.0)
    assert loss > 0


def test_empty_dataset_rejected():
    w = np.zeros(nn.param_count(SMALL))
    with pytest.raises(ValueError):
        nn.loss_and_grad(SMALL, w, np.array([]), 1.0, 0.0)


@pytest.mark.parametrize("trial", range(10))
def test_gradient_matches_finite_differences(trial):
    spec = nn.NetSpec((1, 4, 3, 1))
    rng = RngStream(100 + trial, 0)
    w = nn.init_weights(spec, rng)
    gen = rng.generator
    ts = gen.uniform(-5, 5, size=7)
    amp, phase = float(gen.uniform(0.1, 5)), float(gen.uniform(0, np.pi))
    _, grad = nn.loss_and_grad(spec, w, ts, amp, phase)
    h = 1e-6
    fd = np.empty_like(w)
    for j in range(w.size):
        e = np.zeros_like(w)
        e[j] = h
        lp, _ = nn.loss_and_grad(spec, w + e, ts, amp, phase)
        lm, _ = nn.loss_and_grad(spec, w - e, ts, amp, phase)
        fd[j] = (lp - lm) / (2 * h)
    denom = np.maximum(np.abs(fd), 1e-8)
    assert np.max(np.abs(grad - fd) / denom) <= 1e-5


class TestAdam:
    def test_zero_gradient_leaves_weights_unchanged(self):
        state = nn.AdamState.zeros(4, lr=0.05)
        w = np.ones(4)
        for _ in range(10):
            delta, state = nn.adam_step(state, np.zeros(4))
            w = w + delta
        np.testing.assert_array_equal(w, np.ones(4))
        assert state.step_count == 10

    def test_first_step_magnitude(self):
        # bias-corrected first step is lr * g/(|g| + eps') ~ lr * sign(g)
        state = nn.AdamState.zeros(3, lr=1e-3)
        g = np.array([0.3, -2.0, 5.0])
        delta, state = nn.adam_step(state, g)
        np.testing.assert_allclose(delta, -1e-3 * np.sign(g), rtol=1e-4)
        assert state.step_count == 1

    def test_determinism(self):
        def run():
            state = nn.AdamState.zeros(2, lr=0.01)
            w = np.zeros(2)
            gen = RngStream(0, 9).generator
            for _ in range(25):
                delta, state = nn.adam_step(state, gen.standard_normal(2))
                w = w + delta
            return w

        np.testing.assert_array_equal(run(), run())

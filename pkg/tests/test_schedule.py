import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from autolora.schedule import (
    forward_marginal,
    forward_marginal_batch,
    forward_step,
    make_default_schedule,
    make_linear_schedule,
)


def test_single_step_schedule():
    s = make_linear_schedule(1, 0.5, 0.5)
    assert s.betas.tolist() == [0.5]
    assert s.alphas.tolist() == [0.5]
    assert s.alpha_bars.tolist() == [0.5]


def test_two_step_hand_product():
    s = make_linear_schedule(2, 0.1, 0.3)
    np.testing.assert_allclose(s.alpha_bars, [0.9, 0.9 * 0.7], rtol=0, atol=1e-15)


def test_thousand_steps_against_product_oracle():
    s = make_linear_schedule(1000, 1e-4, 0.02)
    assert np.all(np.diff(s.alpha_bars) < 0)
    acc = 1.0
    for i in range(1000):
        acc *= 1.0 - (1e-4 + i * (0.02 - 1e-4) / 999)
    assert s.alpha_bars[-1] == pytest.approx(acc, rel=1e-10)


@pytest.mark.parametrize("args", [(0, 0.1, 0.2), (5, 0.0, 0.1), (5, 0.1, 1.0), (5, 0.3, 0.1),
                                  (2.5, 0.1, 0.2)])
def test_invalid_schedules_rejected(args):
    with pytest.raises(ValueError):
        make_linear_schedule(*args)


def test_default_schedule_is_rescaled_reference():
    s = make_default_schedule(200)
    assert s.betas[0] == pytest.approx(5e-4)
    assert s.betas[-1] == pytest.approx(0.1)
    assert s.alpha_bars[-1] < 1e-4


def test_alpha_bar_zero_convention_and_bounds():
    s = make_linear_schedule(10, 0.01, 0.2)
    assert s.alpha_bar(0) == 1.0
    with pytest.raises(ValueError):
        s.alpha_bar(11)
    with pytest.raises(ValueError):
        s.beta(0)


def test_forward_step_examples():
    s = make_linear_schedule(3, 0.19, 0.19)
    assert np.array_equal(forward_step(np.zeros(2), 2, np.zeros(2), s), np.zeros(2))
    out = forward_step(np.array([1.0, 0.0]), 1, np.array([0.0, 1.0]), s)
    np.testing.assert_allclose(out, [0.9, np.sqrt(0.19)], atol=1e-15)
    assert out[1] == pytest.approx(0.43589, abs=1e-5)


def test_forward_marginal_examples(rng):
    s = make_linear_schedule(10, 0.01, 0.2)
    x0 = rng.standard_normal(3)
    assert np.array_equal(forward_marginal(x0, 0, np.zeros(3), s), x0)
    n = rng.standard_normal(3)
    np.testing.assert_allclose(forward_marginal(np.zeros(3), 7, n, s),
                               np.sqrt(1 - s.alpha_bar(7)) * n, atol=1e-15)


def test_dimension_mismatch():
    s = make_linear_schedule(10, 0.01, 0.2)
    with pytest.raises(ValueError, match="mismatch"):
        forward_step(np.zeros(2), 1, np.zeros(3), s)
    with pytest.raises(ValueError, match="mismatch"):
        forward_marginal(np.zeros(2), 1, np.zeros(3), s)


def test_batch_marginal_matches_rowwise(rng):
    s = make_linear_schedule(10, 0.01, 0.2)
    x0 = rng.standard_normal((6, 2))
    noise = rng.standard_normal((6, 2))
    t = np.array([1, 3, 5, 7, 9, 10])
    batch = forward_marginal_batch(x0, t, noise, s)
    for i in range(6):
        np.testing.assert_allclose(batch[i], forward_marginal(x0[i], int(t[i]), noise[i], s),
                                   rtol=0, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.floats(1e-4, 0.05), st.floats(0.0, 0.5))
def test_alpha_bars_monotone_in_unit_interval(T, b0, extra):
    s = make_linear_schedule(T, b0, min(b0 + extra, 0.99))
    assert np.all((s.alpha_bars > 0) & (s.alpha_bars < 1))
    assert np.all(np.diff(s.alpha_bars) < 0)

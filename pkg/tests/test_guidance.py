import numpy as np
import pytest

from autolora.denoiser import NULL, Condition
from autolora.guidance import (
    GuidanceConfig,
    Mode,
    ModelPredictor,
    autoguidance_eps,
    autolora_eps,
    autolora_eps_plain,
    cfg_eps,
    reverse_step,
    sample,
    sample_batch,
    x0_estimate,
)
from autolora.schedule import forward_marginal, make_linear_schedule


def const(value_by_cond):
    """Predictor returning a fixed vector per condition label."""
    return lambda x, t, c: np.atleast_1d(np.asarray(value_by_cond[c.label], dtype=float))


Y = Condition(0)


def test_cfg_scalar_probe_and_endpoints():
    m = const({None: 0.2, 0: 1.0})
    assert cfg_eps(m, None, 1, Y, 5.0)[0] == pytest.approx(4.2, abs=1e-15)
    assert cfg_eps(m, None, 1, Y, 1.0)[0] == 1.0
    assert cfg_eps(m, None, 1, Y, 0.0)[0] == 0.2


def test_cfg_requires_label():
    with pytest.raises(ValueError, match="label"):
        cfg_eps(const({None: 0.0}), None, 1, NULL, 2.0)


def test_autoguidance_probe_and_identities():
    good, bad = const({0: 3.0}), const({0: 1.0})
    assert autoguidance_eps(good, bad, None, 1, Y, 2.0)[0] == 5.0
    assert autoguidance_eps(good, bad, None, 1, Y, 0.0)[0] == 1.0
    assert autoguidance_eps(good, bad, None, 1, Y, 1.0)[0] == 3.0
    for w in (0.0, 0.3, 2.0, 7.5):
        assert autoguidance_eps(good, good, None, 1, Y, w)[0] == 3.0


def test_autolora_plain():
    base, lora = const({0: 1.0}), const({0: 2.0})
    assert autolora_eps_plain(base, lora, None, 1, Y, 1.5)[0] == 2.5
    assert autolora_eps_plain(base, lora, None, 1, Y, 0.0)[0] == 1.0
    assert autolora_eps_plain(base, lora, None, 1, Y, 1.0)[0] == 2.0
    assert autolora_eps_plain(base, base, None, 1, Y, 3.3)[0] == 1.0


def test_shape_mismatch_reported():
    with pytest.raises(ValueError, match="mismatch"):
        autolora_eps_plain(const({0: [1.0, 2.0]}), const({0: [1.0]}), None, 1, Y, 1.5)


def test_autolora_cfg_hand_value():
    base, lora = const({None: 0.1, 0: 0.5}), const({None: -0.2, 0: 0.9})
    e1 = 0.1 + 3.0 * 0.4
    e2 = -0.2 + 4.0 * 1.1
    got = autolora_eps(base, lora, None, 1, Y, 3.0, 4.0, 1.5)[0]
    assert got == pytest.approx(e1 + 1.5 * (e2 - e1), rel=1e-14)


def test_x0_estimate_probe_and_zero_eps():
    s = make_linear_schedule(1, 0.36, 0.36)  # abar_1 = 0.64
    assert x0_estimate(np.array([1.0]), np.array([0.5]), 1, s)[0] == pytest.approx(0.875, abs=1e-15)
    assert x0_estimate(np.array([0.8]), np.array([0.0]), 1, s)[0] == pytest.approx(1.0, abs=1e-15)


def test_reverse_step_probe():
    # abar_1 = 0.81 and abar_2 = 0.64 gives alpha_2 = 0.64 / 0.81
    s = make_linear_schedule(2, 0.19, 0.19)
    s = type(s)(T=2, betas=np.array([0.19, 1 - 0.64 / 0.81]),
                alphas=np.array([0.81, 0.64 / 0.81]), alpha_bars=np.array([0.81, 0.64]))
    out = reverse_step(np.array([1.0]), np.array([0.5]), 2, s)[0]
    assert out == pytest.approx(0.9 * 0.875 + np.sqrt(0.19) * 0.5, abs=1e-12)
    assert out == pytest.approx(1.005445, abs=1e-6)


def test_reverse_step_t1_is_x0_hat(rng):
    s = make_linear_schedule(5, 0.05, 0.3)
    x, e = rng.standard_normal(3), rng.standard_normal(3)
    assert np.array_equal(reverse_step(x, e, 1, s), x0_estimate(x, e, 1, s))


def test_perfect_eps_reconstructs_x0(rng):
    s = make_linear_schedule(50, 1e-3, 0.2)
    x0, eps = rng.standard_normal(2), rng.standard_normal(2)
    x = forward_marginal(x0, 50, eps, s)
    for t in range(50, 0, -1):
        x = reverse_step(x, eps, t, s)
    np.testing.assert_allclose(x, x0, rtol=0, atol=1e-8)


def test_config_validation():
    with pytest.raises(ValueError):
        GuidanceConfig(Mode.CFG, w=-1.0)
    with pytest.raises(ValueError):
        GuidanceConfig(Mode.CFG, gamma=float("nan"))
    with pytest.raises(ValueError):
        GuidanceConfig("NOPE")


def test_sampling_reductions_end_to_end(random_base, random_adapter, short_sched):
    seeds = list(range(8))
    run = lambda cfg, ad=random_adapter: sample_batch(random_base, ad, short_sched, cfg, Y, seeds).x0  # noqa: E731
    T = short_sched.T
    vanilla = run(GuidanceConfig(Mode.VANILLA, lora_scale=0.7, steps=T))
    assert np.array_equal(run(GuidanceConfig(Mode.CFG, w=1.0, lora_scale=0.7, steps=T)), vanilla)
    lora_cfg = run(GuidanceConfig(Mode.CFG, w=3.0, lora_scale=0.7, steps=T))
    assert np.array_equal(run(GuidanceConfig(Mode.AUTOLORA_CFG, w1=9.0, w2=3.0, gamma=1.0,
                                             lora_scale=0.7, steps=T)), lora_cfg)


def test_sampler_rejects_inconsistent_inputs(random_base, short_sched):
    with pytest.raises(ValueError, match="adapter"):
        sample(random_base, None, short_sched, GuidanceConfig(Mode.AUTOLORA_CFG, steps=20), Y, 0)
    with pytest.raises(ValueError, match="steps"):
        sample(random_base, None, short_sched, GuidanceConfig(Mode.VANILLA, steps=10), Y, 0)
    with pytest.raises(ValueError, match="label"):
        sample(random_base, None, short_sched, GuidanceConfig(Mode.CFG, w=2, steps=20), NULL, 0)


def test_same_seed_same_noise_across_modes(random_base, random_adapter, short_sched):
    a = sample_batch(random_base, random_adapter, short_sched,
                     GuidanceConfig(Mode.VANILLA, steps=20), Y, [3, 4], record_trajectory=True)
    b = sample_batch(random_base, random_adapter, short_sched,
                     GuidanceConfig(Mode.AUTOLORA_CFG, w1=5, w2=5, gamma=1.5, steps=20), Y, [3, 4],
                     record_trajectory=True)
    assert np.array_equal(a.trajectory[0], b.trajectory[0])
    assert len(a.trajectory) == 21


def test_four_predictor_calls_per_step(random_base, random_adapter, short_sched, rng):
    base = ModelPredictor(random_base, 20)
    lora = ModelPredictor(random_base, 20, random_adapter, 1.0)
    autolora_eps(base, lora, rng.standard_normal((3, 2)), 5, Y, 5.0, 5.0, 1.5)
    assert (base.calls, lora.calls) == (2, 2)


def test_trained_model_stays_in_support(trained_toy, sched200):
    X = sample_batch(trained_toy["base"], None, sched200, GuidanceConfig(Mode.VANILLA), Y,
                     range(512)).x0
    spec = trained_toy["data"].generator_spec
    lo = spec.means.min(axis=0) - 3 * 0.25
    hi = spec.means.max(axis=0) + 3 * 0.25
    inside = np.all((X >= lo) & (X <= hi), axis=1)
    assert inside.mean() >= 0.99

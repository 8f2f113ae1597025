import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dpdisparity import model as M
from dpdisparity.data_harness import LabeledDataset, make_synthetic
from dpdisparity.dp_optimizer import (
    STREAM_BATCHES,
    STREAM_INIT,
    AdamState,
    DpConfig,
    adam_step,
    clip_to_norm,
    clipped_sum,
    privatize_batch,
    sgd_step,
    train,
)
from dpdisparity.numeric_core import RandomSource

vectors = arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e4, 1e4, allow_nan=False))


def cfg_for(mode, b, **kw):
    base = dict(mode=mode, clip_bound=1.0, noise_multiplier=0.0, noise_sigma=0.0,
                batch_size=b, dataset_size=max(b, 10), epochs=1)
    base.update(kw)
    return DpConfig(**base)


def test_clip_examples():
    np.testing.assert_allclose(clip_to_norm(np.array([3.0, 4.0]), 1.0), [0.6, 0.8], rtol=1e-15)
    assert clip_to_norm(np.array([0.3, 0.4]), 1.0).tolist() == [0.3, 0.4]
    assert clip_to_norm(np.zeros(3), 1.0).tolist() == [0.0] * 3
    with pytest.raises(ValueError):
        clip_to_norm(np.ones(2), 0.0)


@settings(max_examples=300, deadline=None)
@given(vectors, st.floats(1e-3, 1e3))
def test_clip_bounds_norm_and_fixes_small_vectors(g, S):
    c = clip_to_norm(g, S)
    assert np.linalg.norm(c) <= S + 1e-12 * max(1.0, S)
    if np.linalg.norm(g) <= S:
        assert np.array_equal(c, g)


@settings(max_examples=300, deadline=None)
@given(vectors, st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_clip_preserves_direction(g, c, S):
    if np.linalg.norm(g) == 0:
        return
    out = clip_to_norm(c * g, S)
    cos = out @ g / (np.linalg.norm(out) * np.linalg.norm(g))
    assert cos >= 1 - 1e-12


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 8), st.integers(1, 6), st.floats(0.1, 10.0), st.data())
def test_sensitivity_of_clipped_sum_is_2S(b, p, S, data):
    grads = data.draw(arrays(np.float64, (b, p), elements=st.floats(-1e3, 1e3)))
    other = data.draw(arrays(np.float64, p, elements=st.floats(-1e3, 1e3)))
    i = data.draw(st.integers(0, b - 1))
    swapped = grads.copy()
    swapped[i] = other
    diff = np.linalg.norm(clipped_sum(grads, S) - clipped_sum(swapped, S))
    assert diff <= 2 * S * (1 + 1e-9)


def test_privatize_without_noise_or_active_clip_is_plain_mean():
    rng = RandomSource(0)
    g = RandomSource(1).uniform(12, -0.1, 0.1).reshape(4, 3)
    cfg = cfg_for("clip_and_noise", 4, noise_multiplier=0.0)
    np.testing.assert_allclose(privatize_batch(g, cfg, rng), g.mean(axis=0), rtol=1e-14)


def test_privatize_single_gradient():
    cfg = cfg_for("clip_only", 1)
    np.testing.assert_allclose(privatize_batch(np.array([[3.0, 4.0]]), cfg, RandomSource(0)), [0.6, 0.8])


def test_modes():
    g = np.array([[3.0, 4.0], [0.0, 10.0]])
    rng = RandomSource(0)
    np.testing.assert_allclose(privatize_batch(g, cfg_for("baseline", 2), rng), [1.5, 7.0])
    np.testing.assert_allclose(privatize_batch(g, cfg_for("clip_only", 2), rng), [0.3, 0.9])
    np.testing.assert_allclose(privatize_batch(g, cfg_for("noise_only", 2, noise_sigma=0.0), rng), [1.5, 7.0])
    with pytest.raises(ValueError):
        privatize_batch(np.zeros((0, 2)), cfg_for("baseline", 2), rng)
    with pytest.raises(ValueError):
        privatize_batch(g, cfg_for("baseline", 3), rng)


def test_config_invariants():
    cfg = DpConfig(mode="clip_and_noise", clip_bound=2.0, noise_multiplier=0.8, batch_size=256, dataset_size=60000)
    assert cfg.sigma == pytest.approx(1.6)
    assert cfg.sampling_rate == 256 / 60000
    assert cfg.steps_per_epoch == 234
    with pytest.raises(ValueError):
        DpConfig(mode="noise_only", noise_sigma=None)
    with pytest.raises(ValueError):
        DpConfig(mode="clip_only", clip_bound=None)
    with pytest.raises(ValueError):
        DpConfig(mode="sideways")
    with pytest.raises(ValueError):
        DpConfig(batch_size=10, dataset_size=5)


@pytest.mark.parametrize("mode,sigma_kw", [
    ("clip_and_noise", dict(noise_multiplier=1.5, clip_bound=2.0)),
    ("noise_only", dict(noise_sigma=3.0)),
])
def test_noise_scale_monte_carlo(mode, sigma_kw):
    b = 4
    cfg = cfg_for(mode, b, **sigma_kw)
    rng = RandomSource(77, 3)
    zeros = np.zeros((b, 3))
    out = np.array([privatize_batch(zeros, cfg, rng) for _ in range(10**5)])
    expected = cfg.sigma / b
    assert np.all(np.abs(out.std(axis=0) / expected - 1) < 0.02)


def test_noise_is_additive_on_top_of_clipped_mean():
    g = RandomSource(3).normal(20).reshape(4, 5)
    noisy = privatize_batch(g, cfg_for("clip_and_noise", 4, noise_multiplier=1.0), RandomSource(9))
    clean = privatize_batch(g, cfg_for("clip_only", 4), RandomSource(9))
    expected_noise = RandomSource(9).normal(5) * 1.0 / 4
    np.testing.assert_allclose(noisy - clean, expected_noise, rtol=1e-12, atol=1e-15)


def test_sgd_step_examples():
    assert sgd_step(np.array([1.0, 1.0]), np.array([1.0, 0.0]), 0.5).tolist() == [0.5, 1.0]
    p = np.array([2.0, -3.0])
    assert sgd_step(p, np.array([5.0, 5.0]), 0.0).tolist() == p.tolist()


def test_sgd_quadratic_contraction():
    theta = RandomSource(1).normal(10)
    start = np.linalg.norm(theta)
    for _ in range(100):
        theta = sgd_step(theta, theta, 0.1)  # grad of 0.5 * ||theta||^2
    assert np.linalg.norm(theta) == pytest.approx(start * 0.9**100, rel=1e-9)


def test_adam_first_step_is_sign_like():
    g = np.array([3.0, -0.5, 1e-3, 20.0])
    _, p = adam_step(AdamState.zeros(4), np.zeros(4), g, 0.01)
    np.testing.assert_allclose(p, -0.01 * np.sign(g), rtol=1e-4)


def test_adam_zero_gradient_keeps_params():
    state, p = AdamState.zeros(3), np.array([1.0, 2.0, 3.0])
    for _ in range(10):
        state, p2 = adam_step(state, p, np.zeros(3), 0.1)
        assert np.array_equal(p2, p)


def textbook_adam(theta, grad_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    m = [0.0] * len(theta)
    v = [0.0] * len(theta)
    theta = list(theta)
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        for j in range(len(theta)):
            m[j] = b1 * m[j] + (1 - b1) * g[j]
            v[j] = b2 * v[j] + (1 - b2) * g[j] ** 2
            mh = m[j] / (1 - b1**t)
            vh = v[j] / (1 - b2**t)
            theta[j] -= lr * mh / (vh**0.5 + eps)
    return theta


def test_adam_matches_textbook_loop():
    a = RandomSource(4).uniform(10, 0.5, 3.0)
    c = RandomSource(5).normal(10)
    theta0 = RandomSource(6).normal(10)

    def grad(th):
        return [a[j] * (th[j] - c[j]) for j in range(10)]

    expected = textbook_adam(theta0.tolist(), grad, 0.05, 50)
    state, theta = AdamState.zeros(10), theta0.copy()
    for _ in range(50):
        state, theta = adam_step(state, theta, a * (theta - c), 0.05)
    np.testing.assert_allclose(theta, expected, rtol=1e-10, atol=1e-12)


def small_problem(n=96):
    rng = RandomSource(0, 1)
    ds = make_synthetic(3, n // 3, 6, 4.0, rng)
    return M.mlp_spec(6, [5], 3), ds


def test_baseline_equals_direct_sgd_loop():
    spec, ds = small_problem()
    cfg = DpConfig(mode="baseline", batch_size=20, dataset_size=len(ds), epochs=3, learning_rate=0.1)
    params, trace = train(spec, ds, cfg, RandomSource(11))
    root = RandomSource(11)
    p = M.init_params(spec, root.stream(STREAM_INIT))
    order_rng = root.stream(STREAM_BATCHES)
    for _ in range(3):
        order = order_rng.permutation(len(ds))
        for s in range(len(ds) // 20):
            idx = order[s * 20:(s + 1) * 20]
            _, g = M.loss_and_grad(spec, p, M.Batch(ds.inputs[idx], ds.labels[idx]))
            p = p - 0.1 * g
    assert np.array_equal(params, p)
    assert trace.num_steps == 3 * (96 // 20)


@pytest.mark.parametrize("mode", ["baseline", "clip_only", "noise_only", "clip_and_noise"])
def test_training_is_deterministic(mode):
    spec, ds = small_problem()
    cfg = DpConfig(mode=mode, clip_bound=0.5, noise_multiplier=1.0, noise_sigma=0.5,
                   batch_size=16, dataset_size=len(ds), epochs=2, optimizer="adam", learning_rate=0.01)
    a, ta = train(spec, ds, cfg, RandomSource(3))
    b, tb = train(spec, ds, cfg, RandomSource(3))
    assert a.tobytes() == b.tobytes()
    assert ta.loss == tb.loss


def test_different_noise_seeds_differ():
    spec, ds = small_problem()
    init = M.init_params(spec, RandomSource(0))
    cfg = DpConfig(mode="clip_and_noise", clip_bound=1.0, noise_multiplier=1.0,
                   batch_size=16, dataset_size=len(ds), epochs=1)
    a, _ = train(spec, ds, cfg, RandomSource(1), init=init)
    b, _ = train(spec, ds, cfg, RandomSource(2), init=init)
    assert not np.array_equal(a, b)


def test_trace_shapes_and_norm_records():
    spec, ds = small_problem()
    cfg = DpConfig(mode="clip_only", clip_bound=1.0, batch_size=16, dataset_size=len(ds), epochs=2)
    _, trace = train(spec, ds, cfg, RandomSource(3), test=ds)
    assert trace.num_steps == 2 * 6
    assert len(trace.class_norm_sum) == trace.num_steps
    assert np.sum(trace.class_count) == trace.num_steps * 16
    assert len(trace.epoch_class_accuracy) == 2
    assert np.all(np.array(trace.update_norm) <= 1.0 + 1e-12)  # mean of clipped gradients


def test_dataset_size_mismatch_rejected():
    spec, ds = small_problem()
    cfg = DpConfig(mode="baseline", batch_size=16, dataset_size=len(ds) + 1, epochs=1)
    with pytest.raises(ValueError):
        train(spec, ds, cfg, RandomSource(0))
    empty = LabeledDataset(np.zeros((0, 6)), np.zeros(0), 3)
    with pytest.raises(ValueError):
        train(spec, empty, cfg, RandomSource(0))

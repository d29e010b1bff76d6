import numpy as np
import pytest

from deskvla.flow import ActionCodec, FlowError, euler_integrate, noise_sample, sample_t, velocity_target


def test_noise_sample_endpoints_and_arithmetic():
    rng = np.random.default_rng(0)
    x0, eps = rng.normal(size=(20, 6)), rng.normal(size=(20, 6))
    assert np.array_equal(noise_sample(x0, eps, 0.0), x0)
    assert np.array_equal(noise_sample(x0, eps, 1.0), eps)
    assert np.array_equal(noise_sample(np.array([2.0]), np.array([0.0]), 0.5), [1.0])


def test_noise_sample_per_item_times_and_errors():
    x0, eps = np.zeros((3, 2, 6)), np.ones((3, 2, 6))
    xt = noise_sample(x0, eps, np.array([0.0, 0.5, 1.0]))
    assert np.array_equal(xt[:, 0, 0], [0.0, 0.5, 1.0])
    with pytest.raises(FlowError):
        noise_sample(x0, np.ones((3, 2, 5)), 0.5)
    with pytest.raises(FlowError):
        noise_sample(x0, eps, 1.5)


def test_sample_t_follows_beta_1_5_1():
    t = sample_t(np.random.default_rng(0), 200_000)
    assert t.min() >= 0 and t.max() <= 1
    assert abs(t.mean() - 0.6) < 5e-3  # mean of Beta(1.5, 1)
    assert abs(np.mean(t < 0.5) - 0.5**1.5) < 5e-3


@pytest.mark.parametrize("k", [1, 2, 5, 8])
def test_exact_field_recovers_data(k):
    rng = np.random.default_rng(k)
    x0, eps = rng.normal(size=(20, 6)), rng.normal(size=(20, 6))
    v = velocity_target(x0, eps)
    res = euler_integrate(lambda x, t: v, eps, k)
    assert np.max(np.abs(res.x - x0)) < 1e-12
    assert len(res.snapshots) == k
    assert res.times == sorted(res.times, reverse=True) and res.times[-1] == 0.0
    for x, t in zip(res.snapshots, res.times):
        assert np.max(np.abs(x - noise_sample(x0, eps, t))) < 1e-12


@pytest.mark.parametrize("k", [1, 2, 4])
def test_exact_field_bitwise_on_dyadic_values(k):
    rng = np.random.default_rng(k)
    x0 = rng.integers(-64, 64, size=(20, 6)) / 16.0
    eps = rng.integers(-64, 64, size=(20, 6)) / 16.0
    v = velocity_target(x0, eps)
    assert np.array_equal(euler_integrate(lambda x, t: v, eps, k).x, x0)


def test_euler_errors():
    with pytest.raises(FlowError):
        euler_integrate(lambda x, t: x, np.zeros(3), 0)
    with pytest.raises(FloatingPointError, match="step 1"):
        euler_integrate(lambda x, t: np.full_like(x, np.nan) if t < 1 else x, np.ones(3), 3)


def test_codec_round_trip():
    traj = np.random.default_rng(0).normal(size=(4, 20, 6)).cumsum(axis=1)
    codec = ActionCodec()
    assert np.allclose(codec.decode(codec.encode(traj)), traj, atol=1e-12)
    enc = codec.encode(traj)
    assert np.allclose(enc[:, 1:, 0:2] * 2.0, np.diff(traj[:, :, 0:2], axis=1))

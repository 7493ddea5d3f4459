import numpy as np
import pytest

from splatdeblur import autodiff as ad
from splatdeblur.blurcompose import WeightNet, blend_output, compose_blur, mean_frames, pixel_weights

from gradcheck import check


def frames(n=3, h=6, w=5, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (n, h, w, 3))


def randomise(store, rng, scale=0.3):
    for name in store.names():
        store[name].data = rng.normal(0, scale, store[name].shape)


def test_zeroed_network_gives_uniform_weights():
    store = ad.ParamStore()
    net = WeightNet(store, channels=4)
    for n in (2, 5):
        P, M = net(ad.Tensor(frames(n)))
        assert np.array_equal(P.data, np.full(P.shape, 1.0 / n))
        assert np.array_equal(M.data, np.full((6, 5, 3), 0.5))


def test_partition_of_unity_for_any_parameters():
    store = ad.ParamStore()
    net = WeightNet(store, channels=6)
    rng = np.random.default_rng(1)
    for _ in range(5):
        randomise(store, rng, 2.0)
        P = pixel_weights(net, frames(4, seed=int(rng.integers(100))))
        assert np.max(np.abs(P.data.sum(axis=0) - 1.0)) < 1e-6
        assert np.all(P.data >= 0)


def test_mask_in_open_interval():
    # float64 sigmoid rounds to exactly 1 past a logit of about 36.7, so the
    # parameters are kept at a scale where the logits stay representable
    store = ad.ParamStore()
    net = WeightNet(store, channels=4)
    randomise(store, np.random.default_rng(2), 0.5)
    _, M = net(ad.Tensor(frames()))
    assert np.all((M.data > 0) & (M.data < 1))
    assert M.data.min() < 0.3 and M.data.max() > 0.7


def test_spatial_size_preserved():
    store = ad.ParamStore()
    P, M = WeightNet(store, channels=4)(ad.Tensor(frames(3, 9, 7)))
    assert P.shape == (3, 9, 7, 3) and M.shape == (9, 7, 3)


def test_bad_frames_rejected():
    net = WeightNet(ad.ParamStore(), channels=4)
    with pytest.raises(ValueError):
        net(ad.Tensor(frames(1)))
    with pytest.raises(ValueError):
        net(ad.Tensor(np.zeros((2, 4, 4, 1))))
    with pytest.raises(ValueError):
        compose_blur(frames(3), np.ones((2, 6, 5, 3)) / 2)


def test_weightnet_gradients():
    store = ad.ParamStore()
    net = WeightNet(store, channels=3)
    rng = np.random.default_rng(3)
    randomise(store, rng)
    x = ad.Tensor(frames(2, 5, 4), requires_grad=True)
    build = lambda: ad.concat([ad.reshape(compose_blur(x, net(x)[0]), (-1,)), ad.reshape(net(x)[1], (-1,))])
    leaves = [x] + [store[n] for n in store.names()]
    assert check(build, leaves, rng=rng) < 1e-5


def test_compose_examples():
    f = frames(3)
    same = np.stack([f[0]] * 3)
    assert np.allclose(compose_blur(same, np.full(same.shape, 1 / 3)).data, f[0], rtol=0, atol=1e-15)
    P = np.zeros((2, 6, 5, 3))
    P[0] = 1.0
    assert np.array_equal(compose_blur(f[:2], P).data, f[0])
    two = np.stack([np.zeros((6, 5, 3)), np.ones((6, 5, 3))])
    assert np.array_equal(compose_blur(two, np.full(two.shape, 0.5)).data, np.full((6, 5, 3), 0.5))


def test_identical_frames_reproduced():
    store = ad.ParamStore()
    net = WeightNet(store, channels=4)
    randomise(store, np.random.default_rng(4), 1.0)
    f = np.stack([frames(1)[0]] * 4)
    out = compose_blur(f, net(ad.Tensor(f))[0]).data
    assert np.max(np.abs(out - f[0])) < 1e-15


def test_composition_is_convex():
    store = ad.ParamStore()
    net = WeightNet(store, channels=4)
    randomise(store, np.random.default_rng(5), 1.0)
    f = frames(5, seed=6)
    out = compose_blur(f, net(ad.Tensor(f))[0]).data
    assert np.all(out >= f.min(axis=0) - 1e-15) and np.all(out <= f.max(axis=0) + 1e-15)


def test_blend_examples():
    s, b = frames(2, seed=7)
    assert blend_output(s, b, np.zeros(s.shape)).data.tobytes() == s.tobytes()
    assert blend_output(s, b, np.ones(s.shape)).data.tobytes() == b.tobytes()
    half = blend_output(np.zeros(s.shape), np.ones(s.shape), np.full(s.shape, 0.5)).data
    assert np.array_equal(half, np.full(s.shape, 0.5))


def test_mean_frames():
    f = frames(4)
    assert np.allclose(mean_frames(f).data, f.mean(axis=0), atol=1e-15)

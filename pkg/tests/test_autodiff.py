import zlib

import numpy as np
import pytest

from splatdeblur import autodiff as ad
from splatdeblur.liegroup import so3_exp
from splatdeblur.motionmodel import normalize_axis, screw_exp_t

from gradcheck import check, rel_error


def leaf(x):
    return ad.Tensor(np.array(x, dtype=float), requires_grad=True)


# one entry per registered op: (name, builder(rng) -> (build, leaves))
def _unary(fn, lo=-2.0, hi=2.0, shape=(3, 4)):
    def make(rng):
        x = leaf(rng.uniform(lo, hi, shape))
        return (lambda: fn(x)), [x]
    return make


def _binary(fn, sa=(3, 4), sb=(3, 4), lo=-2.0, hi=2.0):
    def make(rng):
        a, b = leaf(rng.uniform(lo, hi, sa)), leaf(rng.uniform(lo, hi, sb))
        return (lambda: fn(a, b)), [a, b]
    return make


def _conv(rng):
    x, w, b = leaf(rng.normal(size=(2, 3, 6, 5))), leaf(rng.normal(size=(4, 3, 3, 3))), leaf(rng.normal(size=4))
    return (lambda: ad.conv2d(x, w, b)), [x, w, b]


def _conv_wide(rng):
    x, w = leaf(rng.normal(size=(1, 16, 5, 5))), leaf(rng.normal(size=(2, 16, 3, 3)))
    return (lambda: ad.conv2d(x, w)), [x, w]


def _inv(rng):
    a = leaf(rng.normal(size=(2, 3, 3)) + 3 * np.eye(3))
    return (lambda: ad.inv(a)), [a]


def _concat(rng):
    a, b = leaf(rng.normal(size=(2, 3))), leaf(rng.normal(size=(4, 3)))
    return (lambda: ad.concat([a, b], axis=0)), [a, b]


def _stack(rng):
    a, b = leaf(rng.normal(size=(2, 3))), leaf(rng.normal(size=(2, 3)))
    return (lambda: ad.stack([a, b], axis=1)), [a, b]


def _slice(rng):
    a = leaf(rng.normal(size=(5, 4)))
    return (lambda: a[np.array([0, 2, 2, 4]), 1:3]), [a]


OPS = {
    "add": _binary(ad.add, sb=(4,)),
    "sub": _binary(ad.sub, sa=(1, 4)),
    "mul": _binary(ad.mul, sb=(3, 1)),
    "div": _binary(ad.div, lo=0.5, hi=2.0),
    "matmul": _binary(ad.matmul, sa=(2, 3, 4), sb=(4, 5)),
    "matmul_vec": _binary(ad.matmul, sa=(4,), sb=(4, 2)),
    "neg": _unary(ad.neg),
    "power": _unary(lambda x: ad.power(x, 3.0)),
    "relu": _unary(ad.relu),
    "sigmoid": _unary(ad.sigmoid),
    "tanh": _unary(ad.tanh),
    "exp": _unary(ad.exp),
    "log": _unary(ad.log, 0.5, 3.0),
    "sin": _unary(ad.sin),
    "cos": _unary(ad.cos),
    "sqrt": _unary(ad.sqrt, 0.5, 3.0),
    "square": _unary(ad.square),
    "abs": _unary(ad.absolute),
    "clamp_min": _unary(lambda x: ad.clamp_min(x, 0.1)),
    "sum": _unary(lambda x: ad.tsum(x, axis=1)),
    "mean": _unary(lambda x: ad.mean(x, axis=0, keepdims=True)),
    "reshape": _unary(lambda x: ad.reshape(x, (4, 3))),
    "transpose": _unary(lambda x: ad.transpose(x)),
    "broadcast": _unary(lambda x: ad.broadcast_to(x, (2, 3, 4))),
    "softmax": _unary(lambda x: ad.softmax(x, axis=0)),
    "slice": _slice,
    "concat": _concat,
    "stack": _stack,
    "inv": _inv,
    "conv2d": _conv,
    "conv2d_wide": _conv_wide,
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for trial in range(10):
        build, leaves = OPS[name](rng)
        assert check(build, leaves, rng=rng) < 1e-4, f"{name} trial {trial}"


def test_forward_examples():
    assert np.array_equal(ad.relu(ad.Tensor([-1.0, 2.0])).data, [0.0, 2.0])
    assert np.array_equal(ad.softmax(ad.Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)
    img = np.random.default_rng(0).normal(size=(1, 1, 5, 6))
    assert np.array_equal(ad.conv2d(img, np.full((1, 1, 1, 1), 2.0)).data, 2 * img)


def test_backward_examples():
    x = leaf([1.0, 2.0])
    ad.backward(ad.tsum(ad.square(x)))
    assert np.array_equal(x.grad, [2.0, 4.0])
    x = leaf([-1.0, 2.0])
    ad.backward(ad.tsum(ad.relu(x)))
    assert np.array_equal(x.grad, [0.0, 1.0])
    t = leaf(0.0)
    ad.backward(ad.sin(t))
    assert t.grad == 1.0


def test_conv2d_matches_direct_correlation():
    from scipy.signal import correlate

    rng = np.random.default_rng(3)
    for C, k in ((3, 5), (40, 3), (2, 1)):
        x, w, b = rng.normal(size=(2, C, 7, 6)), rng.normal(size=(3, C, k, k)), rng.normal(size=3)
        ref = np.array([[sum(correlate(x[n, c], w[o, c], mode="same") for c in range(C)) + b[o]
                         for o in range(3)] for n in range(2)])
        assert np.max(np.abs(ad.conv2d(x, w, b).data - ref)) < 1e-12


def test_shared_subexpressions_accumulate():
    x = leaf([0.3, -1.2])
    y = ad.sin(x)
    ad.backward(ad.tsum(y * y + y))
    assert np.allclose(x.grad, (2 * np.sin(x.data) + 1) * np.cos(x.data), atol=1e-15)


def test_leaf_gradients_accumulate_across_calls():
    x = leaf([1.0])
    ad.backward(ad.tsum(x * 3.0))
    ad.backward(ad.tsum(x * 3.0))
    assert x.grad[0] == 6.0


def test_non_scalar_loss_rejected():
    with pytest.raises(ValueError):
        ad.backward(leaf([1.0, 2.0]) * 2.0)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4,\)"):
        ad.add(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros(4)))
    with pytest.raises(ValueError, match="incompatible"):
        ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((2, 3))))


def test_non_finite_forward_raises():
    with pytest.raises(FloatingPointError), np.errstate(invalid="ignore"):
        ad.log(ad.Tensor([-1.0]))


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.parents == ()


def test_forward_is_deterministic():
    rng = np.random.default_rng(5)
    x, w = rng.normal(size=(2, 8, 9, 9)), rng.normal(size=(4, 8, 3, 3))
    a = ad.softmax(ad.conv2d(x, w), axis=0).data
    b = ad.softmax(ad.conv2d(x, w), axis=0).data
    assert a.tobytes() == b.tobytes()


def test_rodrigues_gradients():
    rng = np.random.default_rng(11)
    for _ in range(5):
        w0 = rng.normal(size=(1, 3))
        w = leaf(w0 / np.linalg.norm(w0))
        th = leaf(rng.uniform(-3, 3, (1, 1)))
        v = leaf(rng.normal(size=(1, 3)))
        assert check(lambda: screw_exp_t(w, th, v)[0], [th], rng=rng) < 1e-5
        assert check(lambda: ad.concat([ad.reshape(screw_exp_t(w, th, v)[0], (1, 9)),
                                        screw_exp_t(w, th, v)[1]], axis=1), [w, th, v], rng=rng) < 1e-5
        # the tensor path agrees with the plain one
        assert np.allclose(screw_exp_t(w, th, v)[0].data[0], so3_exp(w.data[0], th.data[0, 0]), atol=1e-14)


def test_axis_normalisation_gradient():
    rng = np.random.default_rng(12)
    for _ in range(5):
        w = leaf(rng.normal(size=(4, 3)))
        assert check(lambda: normalize_axis(w), [w], rng=rng) < 1e-5


def test_param_store():
    store = ad.ParamStore()
    a = store.add("a", np.zeros(3), "g1")
    store.add("b", np.ones((2, 2)), "g2")
    assert store.names("g1") == ["a"] and len(store) == 2
    with pytest.raises(KeyError):
        store.add("a", np.zeros(1))
    state = store.state_dict()
    a.data[:] = 5.0
    store.load_state_dict(state)
    assert np.array_equal(store["a"].data, np.zeros(3))
    with pytest.raises(ValueError):
        store.load_state_dict({"a": np.zeros(4)})


def test_rel_error_helper():
    assert rel_error([1.0, 2.0], [1.0, 2.0]) == 0.0

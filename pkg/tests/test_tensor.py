import numpy as np
import pytest

from shape_tta import tensor as T
from shape_tta.tensor import ShapeError, TapeError, Tensor

from helpers import check_grad

SEEDS = range(20)


def test_softmax_of_zero_logits_is_uniform():
    out = T.softmax(Tensor(np.zeros((2, 4, 3, 3))), axis=1)
    np.testing.assert_array_equal(out.data, 0.25)


def test_relu_values():
    assert T.relu(Tensor(-3.0)).item() == 0.0
    assert T.relu(Tensor(2.5)).item() == 2.5


def test_sum():
    assert Tensor([[1.0, 2.0], [3.0, 4.0]]).sum().item() == 10.0


def test_square_gradient():
    x = Tensor(3.0, requires_grad=True)
    (x * x).backward()
    assert x.grad == 6.0


def test_independent_leaf_gets_zero_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.arange(3.0), requires_grad=True)
    (y * y).sum().backward()
    np.testing.assert_array_equal(x.grad, 0.0)


def test_non_scalar_backward_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(TapeError):
        (x * 2.0).backward()


def test_second_backward_is_an_error():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(TapeError):
        loss.backward()


def test_backward_through_consumed_subgraph_is_an_error():
    x = Tensor(np.ones(3), requires_grad=True)
    y = x * x
    y.sum().backward()
    with pytest.raises(TapeError):
        (y * 2.0).sum().backward()


def test_shared_node_visited_once():
    x = Tensor(2.0, requires_grad=True)
    y = x * x
    (y + y + y).backward()
    assert x.grad == pytest.approx(12.0)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = (x * x).sum()
    assert not y.requires_grad


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError, match=r"add.*\(2, 3\).*\(4,\)"):
        Tensor(np.ones((2, 3))) + Tensor(np.ones(4))
    with pytest.raises(ShapeError, match="conv2d"):
        T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((3, 5, 3, 3))))


def test_channel_softmax_is_simplex():
    rng = np.random.default_rng(0)
    s = T.softmax(Tensor(rng.normal(scale=5.0, size=(3, 5, 4, 4))), axis=1).data
    assert s.min() >= 0 and s.max() <= 1
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    for stride, pad in [(1, 1), (1, 0), (2, 1), (1, 2)]:
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad).data
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        oh = (xp.shape[2] - 3) // stride + 1
        ow = (xp.shape[3] - 3) // stride + 1
        ref = np.zeros((2, 4, oh, ow))
        for n in range(2):
            for o in range(4):
                for i in range(oh):
                    for j in range(ow):
                        patch = xp[n, :, i * stride : i * stride + 3, j * stride : j * stride + 3]
                        ref[n, o, i, j] = (patch * w[o]).sum() + b[o]
        np.testing.assert_allclose(out, ref, atol=1e-12)


def _rand(seed, *shape, positive=False):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=shape)
    return np.abs(x) + 0.5 if positive else x


def _weights(seed, *shape):
    return np.random.default_rng(seed + 1000).normal(size=shape)


# each case: (name, builder(leaf, seed) -> scalar, input factory(seed))
GRAD_CASES = {
    "add": (lambda x, s: (x + _weights(s, 2, 3)).sum() * 1.0 + (x * x).sum(), lambda s: _rand(s, 2, 3)),
    "sub": (lambda x, s: ((_weights(s, 1, 3) - x) ** 2).sum(), lambda s: _rand(s, 2, 3)),
    "mul": (lambda x, s: (x * _weights(s, 3)).sum(), lambda s: _rand(s, 4, 3)),
    "div": (lambda x, s: (_weights(s, 4) / x).sum() + (x / 3.0).sum(), lambda s: _rand(s, 4, positive=True)),
    "pow": (lambda x, s: (x**3).sum(), lambda s: _rand(s, 6)),
    "log": (lambda x, s: (T.log(x) * _weights(s, 5)).sum(), lambda s: _rand(s, 5, positive=True)),
    "exp": (lambda x, s: (T.exp(x) * _weights(s, 5)).sum(), lambda s: _rand(s, 5)),
    "sqrt": (lambda x, s: (T.sqrt(x) * _weights(s, 5)).sum(), lambda s: _rand(s, 5, positive=True)),
    "relu": (lambda x, s: (T.relu(x) * _weights(s, 8)).sum(), lambda s: _rand(s, 8)),
    "maximum": (lambda x, s: (T.maximum(x, 0.1) ** 2).sum(), lambda s: _rand(s, 8)),
    "sum_axis": (lambda x, s: (x.sum(axis=1) ** 2).sum(), lambda s: _rand(s, 3, 4)),
    "mean_axis": (lambda x, s: (x.mean(axis=(0, 2)) ** 2).sum(), lambda s: _rand(s, 2, 3, 4)),
    "reshape": (lambda x, s: (x.reshape(3, 4) * _weights(s, 3, 4)).sum(), lambda s: _rand(s, 12)),
    "getitem": (lambda x, s: (x[:, 1:3] ** 2).sum() + x[0, 0], lambda s: _rand(s, 3, 4)),
    "concat": (
        lambda x, s: (T.concat([x, x * 2.0], axis=1) * _weights(s, 2, 6, 2)).sum(),
        lambda s: _rand(s, 2, 3, 2),
    ),
    "softmax": (lambda x, s: (T.softmax(x, axis=1) * _weights(s, 2, 4, 2, 2)).sum(), lambda s: _rand(s, 2, 4, 2, 2)),
    "log_softmax": (
        lambda x, s: (T.log_softmax(x, axis=1) * _weights(s, 2, 3, 2, 2)).sum(),
        lambda s: _rand(s, 2, 3, 2, 2),
    ),
    "softmax_entropy": (
        lambda x, s: -(T.softmax(x, axis=1) * T.log_softmax(x, axis=1)).sum(),
        lambda s: _rand(s, 2, 4, 2, 2),
    ),
    "conv2d": (
        lambda x, s: (T.conv2d(x, Tensor(_weights(s, 2, 2, 3, 3)), padding=1) * _weights(s + 1, 1, 2, 4, 4)).sum(),
        lambda s: _rand(s, 1, 2, 4, 4),
    ),
    "conv2d_strided": (
        lambda x, s: (T.conv2d(x, Tensor(_weights(s, 2, 2, 3, 3)), stride=2, padding=1) ** 2).sum(),
        lambda s: _rand(s, 1, 2, 4, 4),
    ),
    "conv2d_weight": (
        lambda w, s: (T.conv2d(Tensor(_rand(s + 3, 2, 2, 4, 4)), w, padding=1) * _weights(s + 1, 2, 2, 4, 4)).sum(),
        lambda s: _rand(s, 2, 2, 3, 3),
    ),
    "conv2d_weight_strided": (
        lambda w, s: (T.conv2d(Tensor(_rand(s + 3, 1, 2, 5, 5)), w, stride=2) ** 2).sum(),
        lambda s: _rand(s, 2, 2, 3, 3),
    ),
    "conv2d_bias": (
        lambda b, s: (T.conv2d(Tensor(_rand(s, 2, 2, 3, 3)), Tensor(_weights(s, 4, 2, 1, 1)), b) ** 2).sum(),
        lambda s: _rand(s, 4),
    ),
    "max_pool2d": (lambda x, s: (T.max_pool2d(x) * _weights(s, 1, 2, 2, 2)).sum(), lambda s: _rand(s, 1, 2, 4, 4)),
    "upsample": (
        lambda x, s: (T.upsample_nearest(x) * _weights(s, 1, 2, 4, 4)).sum(),
        lambda s: _rand(s, 1, 2, 2, 2),
    ),
    "batch_norm_x": (
        lambda x, s: (
            T.batch_norm(x, Tensor(_weights(s, 2) + 1.5), Tensor(_weights(s + 1, 2))) * _weights(s + 2, 3, 2, 2, 2)
        ).sum(),
        lambda s: _rand(s, 3, 2, 2, 2),
    ),
    "batch_norm_gamma": (
        lambda g, s: (
            T.batch_norm(Tensor(_rand(s + 5, 3, 2, 2, 2)), g, Tensor(np.zeros(2))) * _weights(s, 3, 2, 2, 2)
        ).sum(),
        lambda s: _rand(s, 2),
    ),
    "batch_norm_beta": (
        lambda b, s: (
            T.batch_norm(Tensor(_rand(s + 5, 3, 2, 2, 2)), Tensor(np.ones(2)), b) ** 2 * _weights(s, 3, 2, 2, 2)
        ).sum(),
        lambda s: _rand(s, 2),
    ),
    "batch_norm_eval": (
        lambda x, s: (
            T.batch_norm(
                x, Tensor(np.full(2, 1.3)), Tensor(np.zeros(2)), np.array([0.1, -0.2]), np.array([1.5, 0.7]), training=False
            )
            ** 2
        ).sum(),
        lambda s: _rand(s, 2, 2, 2, 2),
    ),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradient_matches_finite_differences(name):
    build, make = GRAD_CASES[name]
    worst = 0.0
    for seed in SEEDS:
        x = make(seed)
        assert x.size <= 64
        worst = max(worst, check_grad(lambda t: build(t, seed), x))
    assert worst <= 1e-4, f"{name}: max relative error {worst:.2e}"


def test_batchnorm_train_mode_updates_running_stats():
    rng = np.random.default_rng(3)
    x = rng.normal(loc=2.0, scale=3.0, size=(4, 2, 3, 3))
    rm, rv = np.zeros(2), np.ones(2)
    T.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True, momentum=1.0)
    np.testing.assert_allclose(rm, x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, x.var(axis=(0, 2, 3), ddof=1))


def test_float32_stays_float32():
    x = Tensor(np.ones((1, 1, 4, 4), dtype=np.float32), requires_grad=True)
    w = Tensor(np.ones((2, 1, 3, 3), dtype=np.float32))
    y = T.softmax(T.conv2d(x, w, padding=1) * 0.5 + 1.0, axis=1)
    assert y.dtype == np.float32
    y.sum().backward()
    assert x.grad.dtype == np.float32

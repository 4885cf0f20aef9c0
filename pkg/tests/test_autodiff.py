import zlib

import numpy as np
import pytest

from condshape import autodiff as ad
from condshape.autodiff import NotScalar, ShapeMismatch, Tensor
from oracles import central_difference, rel_error


def leaf(x):
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


def test_square_derivative():
    x = leaf(3.0)
    assert ad.grad(ad.mul(x, x), [x])[0] == 6.0


def test_relu_negative_and_zero():
    x = leaf([-1.0, 0.0, 2.0])
    assert list(ad.grad(ad.reduce_sum(ad.relu(x)), [x])[0]) == [0.0, 0.0, 1.0]


def test_forward_identities(rng):
    a = rng.normal(size=(2, 3))
    assert np.array_equal(ad.matmul(np.eye(2), a).data, a)
    s = rng.normal(size=(5, 3))
    assert np.all(np.diag(ad.sqdist_matrix(s, s).data) == 0)
    b = rng.normal(size=(4, 3))
    assert np.array_equal(ad.gather(ad.concat([s, b]), np.arange(5)).data, s)
    vals, idx = ad.reduce_min_with_index(np.array([[3.0, 1.0, 1.0]]))
    assert vals.data[0] == 1.0 and idx[0] == 1


def test_errors():
    with pytest.raises(ShapeMismatch):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeMismatch):
        ad.add(np.ones(3), np.ones(4))
    with pytest.raises(NotScalar):
        ad.backward(leaf([1.0, 2.0]))


def test_unreached_leaf_gets_zero():
    x, y = leaf(2.0), leaf(5.0)
    gx, gy = ad.grad(ad.mul(x, 3.0), [x, y])
    assert gx == 3.0 and gy == 0.0


OPS = {
    "add": lambda a, b: ad.add(a, b),
    "sub": lambda a, b: ad.sub(a, b),
    "mul": lambda a, b: ad.mul(a, b),
    "matmul": lambda a, b: ad.matmul(a, ad.transpose(b)),
    "tanh": lambda a, b: ad.tanh(ad.mul(a, b)),
    "relu": lambda a, b: ad.relu(ad.sub(a, b)),
    "sqrt": lambda a, b: ad.sqrt(ad.add(ad.mul(a, a), 1.0)),
    "square": lambda a, b: ad.square(ad.add(a, b)),
    "concat": lambda a, b: ad.concat([a, b], axis=1),
    "reshape": lambda a, b: ad.reshape(ad.mul(a, b), (-1,)),
    "reduce_sum": lambda a, b: ad.reduce_sum(ad.mul(a, b), axis=0),
    "mean": lambda a, b: ad.mean(ad.mul(a, b), axis=1),
    "min": lambda a, b: ad.reduce_min_with_index(ad.add(a, b), axis=1)[0],
    "max": lambda a, b: ad.reduce_max(ad.add(a, b), axis=0),
    "gather": lambda a, b: ad.gather(ad.mul(a, b), [2, 0, 2], axis=0),
    "index": lambda a, b: ad.mul(a, b)[1:, :2],
    "sqdist": lambda a, b: ad.sqdist_matrix(a, b),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_matches_finite_differences(name):
    r = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(100):
        a0, b0 = r.normal(size=(4, 3)), r.normal(size=(4, 3))
        def scalar(a, b):
            out = OPS[name](a, b)
            weights = np.cos(np.arange(out.data.size)).reshape(out.shape)
            return ad.reduce_sum(ad.mul(out, weights))
        a, b = leaf(a0), leaf(b0)
        ga, gb = ad.grad(scalar(a, b), [a, b])
        na = central_difference(lambda x: float(scalar(x, b0).data), a0)
        nb = central_difference(lambda x: float(scalar(a0, x).data), b0)
        assert rel_error(ga, na) < 1e-4 and rel_error(gb, nb) < 1e-4, name


def test_backward_is_deterministic(rng):
    a0 = rng.normal(size=(5, 3))
    def run():
        a = leaf(a0)
        loss = ad.reduce_sum(ad.tanh(ad.matmul(a, ad.transpose(a))))
        return ad.grad(loss, [a])[0]
    assert np.array_equal(run(), run())


def test_input_gradient_linear_tanh_and_zero(rng):
    w = rng.normal(size=(6, 1))
    assert np.allclose(ad.input_gradient(lambda z: ad.matmul(z, w), rng.normal(size=(1, 6))), w.T, atol=0)
    w1, w2 = rng.normal(size=(6, 5)), rng.normal(size=(5, 1))
    f = lambda z: ad.matmul(ad.tanh(ad.matmul(z, w1)), w2)
    z0 = rng.normal(size=(1, 6))
    num = central_difference(lambda z: float(f(z).data.sum()), z0)
    assert rel_error(ad.input_gradient(f, z0), num) < 1e-4
    assert not np.any(ad.input_gradient(lambda z: ad.matmul(z, np.zeros((6, 1))), z0))


def test_checkpoint_round_trip(tmp_path, rng):
    params = {"w": rng.normal(size=(3, 4)), "b": rng.normal(size=4), "s": np.array(2.0)}
    ad.save_checkpoint(tmp_path / "c.bin", params)
    back = ad.load_checkpoint(tmp_path / "c.bin")
    assert list(back) == list(params)
    assert all(np.array_equal(back[k], params[k]) for k in params)
    (tmp_path / "bad.bin").write_bytes(b"XXXX")
    with pytest.raises(ValueError):
        ad.load_checkpoint(tmp_path / "bad.bin")

import numpy as np
import pytest

import mspc.autodiff as ad
from oracles import central_difference, rel_err


def check_op(build, arrays, seed=0, tol=1e-7):
    """Compare tape gradients of ``sum(build(*vars) * R)`` with central differences."""
    rng = np.random.default_rng(seed)
    tape = ad.Tape()
    leaves = [tape.leaf(a) for a in arrays]
    out = build(*leaves)
    probe = rng.standard_normal(out.data.shape)
    tape.backward(out, probe)

    def f():
        return float((build(*[ad.Var(a) for a in arrays]).data * probe).sum())

    for leaf, a in zip(leaves, arrays):
        num = central_difference(f, a)
        assert rel_err(leaf.grad, num) < tol


def test_elementwise_ops():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(1, 3))
    check_op(ad.add, [a.copy(), b.copy()])
    check_op(ad.sub, [a.copy(), b.copy()])
    check_op(ad.mul, [a.copy(), b.copy()])
    check_op(ad.relu, [a + np.sign(a) * 0.1])


def test_linear_and_layer_norm():
    rng = np.random.default_rng(2)
    x, w, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3)), rng.normal(size=3)
    check_op(ad.linear, [x, w, b])
    g, beta = rng.normal(size=4), rng.normal(size=4)
    check_op(ad.layer_norm, [x.copy(), g, beta])


def test_gather_with_repeats():
    x = np.random.default_rng(3).normal(size=(5, 2))
    idx = np.array([[0, 0, 4], [2, 1, 0]])
    check_op(lambda v: ad.gather(v, idx), [x])


def test_softmax_and_group_sum():
    rng = np.random.default_rng(4)
    check_op(lambda v: ad.softmax(v, 1), [rng.normal(size=(3, 4, 2))])
    w, v = rng.normal(size=(3, 4, 2)), rng.normal(size=(3, 4, 6))
    check_op(ad.group_weighted_sum, [w, v])


def test_segment_max():
    x = np.random.default_rng(5).normal(size=(7, 3))
    seg = np.array([2, 0, 1, 0, 2, 2, 1])
    check_op(lambda v: ad.segment_max(v, seg, 3), [x])
    out = ad.segment_max(ad.Var(x), seg, 3).data
    assert out.tolist() == [x[[1, 3]].max(0).tolist(), x[[2, 6]].max(0).tolist(),
                            x[[0, 4, 5]].max(0).tolist()]


def test_segment_max_tie_goes_to_first_row():
    tape = ad.Tape()
    x = tape.leaf(np.array([[1.0], [1.0], [0.0]]))
    out = ad.segment_max(x, np.array([0, 0, 0]), 1)
    tape.backward(out, np.ones((1, 1)))
    assert x.grad.ravel().tolist() == [1.0, 0.0, 0.0]


def test_segment_max_rejects_empty_segment():
    with pytest.raises(ValueError):
        ad.segment_max(ad.Var(np.zeros((2, 1))), np.array([0, 2]), 3)


def test_shared_input_accumulates():
    tape = ad.Tape()
    x = tape.leaf(np.array([2.0, 3.0]))
    out = ad.sum_all(ad.mul(x, x))
    tape.backward(out, np.array(1.0))
    assert x.grad.tolist() == [4.0, 6.0]
    assert tape.records == []


def test_no_tape_records_nothing():
    out = ad.add(ad.Var(np.ones(2)), ad.Var(np.ones(2)))
    assert out.tape is None


def test_relative_error_floor():
    assert ad.relative_error(np.zeros(3), np.full(3, 1e-12), floor=1e-6) == pytest.approx(np.sqrt(3) * 1e-6)
    assert ad.relative_error(np.ones(2), np.ones(2)) == 0.0


def test_numeric_gradient_quadratic():
    x = np.array([1.0, -2.0, 0.5])
    g = ad.numeric_gradient(lambda: float((x ** 2).sum()), x)
    np.testing.assert_allclose(g, 2 * x, rtol=1e-8)
    g = ad.numeric_gradient(lambda: float((x ** 2).sum()), x, indices=[1])
    assert g[0] == 0.0 and g[1] == pytest.approx(-4.0)

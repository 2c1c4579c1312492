import numpy as np
import pytest

from gabo import autodiff as ad
from gabo.autodiff import Tape, Tensor
from gabo.gradcheck import FD_RTOL, check_gradient, check_second_order


def rand(rng, *shape):
    # keep values away from relu/abs kinks
    x = rng.uniform(0.15, 1.2, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


# ---------------------------------------------------------------------------
# forward examples


def test_relu_example():
    out = ad.relu(Tensor([-1.0, 2.0]))
    assert np.array_equal(out.data, [0.0, 2.0])


def test_matmul_identity():
    out = ad.matmul(Tensor(np.eye(2)), Tensor([[3.0, 4.0], [5.0, 6.0]]))
    assert np.array_equal(out.data, [[3.0, 4.0], [5.0, 6.0]])


def test_scatter_sum_swaps_rows():
    rows = Tensor([[1.0, 0.0], [0.0, 1.0]])
    # edges 0->1 and 1->0: each destination receives the other row
    src = ad.index_select(rows, np.array([0, 1]))
    out = ad.scatter_sum(src, np.array([1, 0]), 2)
    assert np.array_equal(out.data, [[0.0, 1.0], [1.0, 0.0]])


def test_shape_mismatch_messages():
    with pytest.raises(ad.ShapeError, match=r"add.*\(2,\).*\(3,\)"):
        ad.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_untracked_inputs_stay_untracked():
    out = ad.add(Tensor([1.0]), Tensor([2.0]))
    assert not out.is_tracked()


def test_tracked_when_any_input_tracked():
    tape = Tape()
    x = tape.leaf([1.0, 2.0])
    out = ad.add(x, Tensor([3.0, 4.0]))
    assert out.is_tracked() and out.tape is tape


# ---------------------------------------------------------------------------
# grad


def test_grad_square():
    tape = Tape()
    x = tape.leaf(3.0)
    (g,) = ad.grad(ad.mul(x, x), [x])
    assert g.data == pytest.approx(6.0)


def test_grad_of_grad_cube():
    tape = Tape()
    x = tape.leaf(2.0)
    y = ad.mul(ad.mul(x, x), x)
    (g1,) = ad.grad(y, [x], create_graph=True)
    assert g1.data == pytest.approx(12.0)
    (g2,) = ad.grad(g1, [x])
    assert g2.data == pytest.approx(12.0)


def test_grad_matmul_chain_vs_fd():
    rng = np.random.default_rng(0)
    a, b, c = rand(rng, 3, 3), rand(rng, 3, 3), rand(rng, 3, 3)

    def f(ts):
        return ad.tsum(ad.sigmoid(ad.matmul(ad.matmul(ts[0], ts[1]), ts[2])))

    assert check_gradient(f, [a, b, c]) < FD_RTOL


def test_grad_requires_scalar_output():
    tape = Tape()
    x = tape.leaf([1.0, 2.0])
    with pytest.raises(ad.ShapeError, match="scalar"):
        ad.grad(ad.mul(x, x), [x])


def test_grad_wrt_off_tape_errors():
    tape = Tape()
    x = tape.leaf(2.0)
    stray = Tensor(1.0)
    with pytest.raises(ad.TapeError):
        ad.grad(ad.mul(x, x), [stray])


def test_grad_unreached_wrt_is_zero():
    tape = Tape()
    x = tape.leaf(2.0)
    z = tape.leaf([1.0, 1.0])
    (gz,) = ad.grad(ad.mul(x, x), [z])
    assert np.array_equal(gz.data, [0.0, 0.0])


def test_fanout_accumulates():
    tape = Tape()
    x = tape.leaf(1.5)
    y = ad.add(ad.mul(x, x), ad.mul(x, Tensor(3.0)))
    (g,) = ad.grad(y, [x])
    assert g.data == pytest.approx(2 * 1.5 + 3.0)


# ---------------------------------------------------------------------------
# per-op randomized fd checks, first order

OPS = {
    "add": (2, lambda ts: ad.tsum(ad.add(ts[0], ts[1]))),
    "sub": (2, lambda ts: ad.tsum(ad.sub(ts[0], ts[1]))),
    "mul": (2, lambda ts: ad.tsum(ad.mul(ts[0], ts[1]))),
    "matmul": (2, lambda ts: ad.tsum(ad.matmul(ts[0], ts[1]))),
    "relu": (1, lambda ts: ad.tsum(ad.relu(ts[0]))),
    "sigmoid": (1, lambda ts: ad.tsum(ad.sigmoid(ts[0]))),
    "softplus": (1, lambda ts: ad.tsum(ad.softplus(ts[0]))),
    "sum": (1, lambda ts: ad.tsum(ts[0])),
    "mean": (1, lambda ts: ad.tmean(ts[0])),
    "concat": (2, lambda ts: ad.tsum(ad.sigmoid(ad.concat([ts[0], ts[1]], axis=1)))),
    "index_select": (1, lambda ts: ad.tsum(ad.mul(
        ad.index_select(ts[0], np.array([0, 2, 2, 1])),
        ad.index_select(ts[0], np.array([1, 1, 0, 2]))))),
    "scatter_sum": (1, lambda ts: ad.tsum(ad.sigmoid(
        ad.scatter_sum(ts[0], np.array([1, 0, 1]), 2)))),
    "broadcast": (1, lambda ts: ad.tsum(ad.sigmoid(
        ad.broadcast_to(ad.axis_sum(ts[0], 1), (3, 4))))),
    "transpose": (1, lambda ts: ad.tsum(ad.sigmoid(ad.matmul(ts[0], ad.transpose(ts[0]))))),
}


def _instances(name, arity, rng):
    shapes = [(3, 4), (4, 3)] if name == "matmul" else [(3, 4)] * arity
    return [rand(rng, *s) for s in shapes]


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradient_matches_fd(name):
    arity, f = OPS[name]
    rng = np.random.default_rng(sum(map(ord, name)))
    for _ in range(20):
        arrays = _instances(name, arity, rng)
        assert check_gradient(f, arrays) < FD_RTOL, name


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_second_order_matches_fd(name):
    arity, f = OPS[name]
    rng = np.random.default_rng(sum(map(ord, name)) + 1)
    for _ in range(20):
        arrays = _instances(name, arity, rng)
        vectors = [rng.standard_normal(a.shape) for a in arrays]
        assert check_second_order(f, arrays, vectors) < FD_RTOL, name


def test_second_order_mixed_composite():
    rng = np.random.default_rng(7)

    def f(ts):
        h = ad.relu(ad.matmul(ts[0], ts[1]))
        pooled = ad.scatter_sum(h, np.array([0, 1, 0]), 2)
        return ad.tmean(ad.softplus(pooled))

    for _ in range(20):
        arrays = [rand(rng, 3, 4), rand(rng, 4, 4)]
        vectors = [rng.standard_normal(a.shape) for a in arrays]
        assert check_second_order(f, arrays, vectors) < FD_RTOL


# ---------------------------------------------------------------------------
# sgd step


def test_sgd_plain_step():
    (p2,), (v2,) = ad.sgd_momentum_step([Tensor(1.0)], [Tensor(2.0)], [Tensor(0.0)],
                                        lr=0.1, momentum=0.0)
    assert p2.data == pytest.approx(0.8)


def test_sgd_momentum_recurrence():
    p, v = Tensor(1.0), Tensor(0.0)
    (p,), (v,) = ad.sgd_momentum_step([p], [Tensor(1.0)], [v], lr=0.1, momentum=0.9)
    assert p.data == pytest.approx(0.9) and v.data == pytest.approx(1.0)
    (p,), (v,) = ad.sgd_momentum_step([p], [Tensor(1.0)], [v], lr=0.1, momentum=0.9)
    assert v.data == pytest.approx(1.9) and p.data == pytest.approx(0.71)


def test_sgd_weight_decay_only():
    (p2,), _ = ad.sgd_momentum_step([Tensor(2.0)], [Tensor(0.0)], [Tensor(0.0)],
                                    lr=0.1, momentum=0.0, weight_decay=0.5)
    assert p2.data == pytest.approx(1.9)


def test_sgd_rejects_bad_hyperparams():
    args = ([Tensor(1.0)], [Tensor(1.0)], [Tensor(0.0)])
    with pytest.raises(ValueError, match="negative lr"):
        ad.sgd_momentum_step(*args, lr=-0.1, momentum=0.0)
    with pytest.raises(ValueError, match="momentum"):
        ad.sgd_momentum_step(*args, lr=0.1, momentum=1.0)


def test_sgd_tracked_is_differentiable():
    tape = Tape()
    p = tape.leaf(1.0)
    g = ad.mul(p, Tensor(2.0))  # g = 2p
    (p2_list, _) = ad.sgd_momentum_step([p], [g], [Tensor(0.0)],
                                        lr=0.1, momentum=0.0, tracked=True)
    # p2 = p - 0.1*2p = 0.8p -> d p2/dp = 0.8
    (dp,) = ad.grad(p2_list[0], [p])
    assert dp.data == pytest.approx(0.8)


# ---------------------------------------------------------------------------
# tape behaviour


def test_tape_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(123)
        tape = Tape()
        a = tape.leaf(rng.standard_normal((4, 4)))
        b = tape.leaf(rng.standard_normal((4, 4)))
        out = ad.tsum(ad.sigmoid(ad.matmul(ad.relu(a), b)))
        gs = ad.grad(out, [a, b])
        return out.data.copy(), [g.data.copy() for g in gs]

    o1, g1 = run()
    o2, g2 = run()
    assert o1.tobytes() == o2.tobytes()
    assert all(x.tobytes() == y.tobytes() for x, y in zip(g1, g2))


def test_tape_reset_invalidates_handles():
    tape = Tape()
    x = tape.leaf(1.0)
    tape.reset()
    assert not x.is_tracked()
    out = ad.mul(x, x)
    assert not out.is_tracked()


def test_mixing_live_tapes_rejected():
    t1, t2 = Tape(), Tape()
    a, b = t1.leaf(1.0), t2.leaf(2.0)
    with pytest.raises(ad.TapeError, match="two live tapes"):
        ad.add(a, b)


def test_backward_reentrancy_grows_same_tape():
    tape = Tape()
    x = tape.leaf(2.0)
    y = ad.mul(ad.mul(x, x), x)
    n_before = len(tape)
    ad.grad(y, [x], create_graph=True)
    assert len(tape) > n_before
    n_mid = len(tape)
    # paused backward must not grow the tape
    z = ad.mul(x, x)
    ad.grad(z, [x])
    assert len(tape) == n_mid + 1  # only the forward mul recorded

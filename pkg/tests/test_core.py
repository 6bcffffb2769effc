import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recrl.core import tensor as T
from recrl.core.gradcheck import max_relative_error, numeric_grad
from recrl.core.nn import GRUCellParams, Linear, Module, gru_cell
from recrl.core.optim import SGD, Adam
from recrl.core.tensor import Tape, Tensor, backward
from recrl.errors import ContractViolation, NumericError


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


class TestForward:
    def test_matmul_identity(self):
        A = np.random.default_rng(0).normal(size=(3, 3))
        out = T.matmul(np.eye(3), A)
        np.testing.assert_array_equal(out.data, A)

    def test_softmax_uniform(self):
        np.testing.assert_allclose(T.softmax(np.zeros(3)).data, [1 / 3] * 3, atol=1e-15)

    def test_sigmoid_zero(self):
        assert T.sigmoid(np.array(0.0)).item() == 0.5

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            T.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_add_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            T.add(np.ones((2, 3)), np.ones((4,)))

    def test_log_zero_is_numeric_error(self):
        with pytest.raises(NumericError):
            T.log(np.zeros(2))

    def test_overflow_is_numeric_error(self):
        with pytest.raises(NumericError):
            T.exp(np.array([1000.0]))

    def test_no_tape_no_record(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = T.mul(x, x)
        assert not y.requires_grad

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=20))
    def test_softmax_sums_to_one_and_positive(self, xs):
        p = T.softmax(np.array(xs)).data
        assert abs(p.sum() - 1.0) < 1e-9
        assert np.all(p > 0)


class TestBackward:
    def test_square(self):
        x = Tensor(3.0, requires_grad=True)
        with Tape() as tape:
            loss = T.mul(x, x)
        backward(tape, loss)
        assert x.grad == pytest.approx(6.0)

    def test_sum_softmax_has_zero_grad(self):
        z = Tensor(np.random.default_rng(1).normal(size=5), requires_grad=True)
        with Tape() as tape:
            loss = T.sum_(T.softmax(z))
        backward(tape, loss)
        np.testing.assert_allclose(z.grad, 0.0, atol=1e-15)

    def test_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = T.mul(x, 2.0)
        with pytest.raises(ContractViolation):
            backward(tape, y)

    def test_unused_leaf_gets_zero(self):
        x = Tensor(np.ones(3), requires_grad=True)
        unused = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            loss = T.sum_(x)
        backward(tape, loss, [x, unused])
        np.testing.assert_array_equal(unused.grad, np.zeros(2))

    def test_each_node_visited_once_with_fanout(self):
        x = Tensor(2.0, requires_grad=True)
        with Tape() as tape:
            y = T.mul(x, x)
            loss = T.add(y, y)  # d/dx 2x^2 = 4x
        backward(tape, loss)
        assert x.grad == pytest.approx(8.0)

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(5)
            lin = Linear(4, 3, rng)
            x = rng.normal(size=(6, 4))
            with Tape() as tape:
                loss = T.mean(T.tanh(lin(x)))
            backward(tape, loss)
            return [p.grad.tobytes() for p in lin.parameters()]

        assert run() == run()


def _mlp_loss(rng):
    W1, b1 = leaf(rng, 4, 5), leaf(rng, 5)
    W2, b2 = leaf(rng, 5, 3), leaf(rng, 3)
    x = rng.normal(size=(7, 4))
    y = rng.integers(0, 3, size=7)

    def fn():
        h = T.tanh(T.add(T.matmul(x, W1), b1))
        logits = T.add(T.matmul(h, W2), b2)
        return T.neg(T.mean(T.pick(T.log_softmax(logits), y)))

    return fn, [W1, b1, W2, b2]


# one builder per differentiable primitive; each returns (loss_fn, leaves)
def _prims(rng):
    a, b = leaf(rng, 3, 4), leaf(rng, 3, 4)
    pos = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    row = leaf(rng, 4)
    c = leaf(rng, 4, 2)
    batched = leaf(rng, 2, 3, 4)
    other = leaf(rng, 2, 4, 3)
    table = leaf(rng, 6, 3)
    idx = rng.integers(0, 6, size=(2, 5))
    mask = rng.random((3, 4)) > 0.3
    mask[:, 0] = True
    w = rng.normal(size=(3, 4))
    w8 = rng.normal(size=(3, 8))
    w23 = rng.normal(size=(2, 3))
    return {
        "add": (lambda: T.sum_(T.mul(T.add(a, row), w)), [a, row]),
        "sub": (lambda: T.sum_(T.mul(T.sub(a, b), w)), [a, b]),
        "mul": (lambda: T.sum_(T.mul(a, b)), [a, b]),
        "div": (lambda: T.sum_(T.div(a, pos)), [a, pos]),
        "matmul": (lambda: T.sum_(T.tanh(T.matmul(a, c))), [a, c]),
        "batched_matmul": (lambda: T.sum_(T.tanh(T.matmul(batched, other))), [batched, other]),
        "matmul_3d_2d": (lambda: T.sum_(T.tanh(T.matmul(batched, c))), [batched, c]),
        "transpose": (lambda: T.sum_(T.mul(T.transpose(T.matmul(a, c)), w23)), [a, c]),
        "tanh": (lambda: T.sum_(T.mul(T.tanh(a), w)), [a]),
        "sigmoid": (lambda: T.sum_(T.mul(T.sigmoid(a), w)), [a]),
        "relu": (lambda: T.sum_(T.mul(T.relu(a), w)), [a]),
        "exp": (lambda: T.sum_(T.exp(T.mul(a, 0.5))), [a]),
        "log": (lambda: T.sum_(T.mul(T.log(pos), w)), [pos]),
        "softmax": (lambda: T.sum_(T.mul(T.softmax(a), w)), [a]),
        "log_softmax": (lambda: T.sum_(T.mul(T.log_softmax(a), w)), [a]),
        "logsumexp": (lambda: T.sum_(T.mul(T.logsumexp(a), w[:, 0])), [a]),
        "mean_axis": (lambda: T.sum_(T.mul(T.mean(a, axis=0), row)), [a, row]),
        "sum_keepdims": (lambda: T.sum_(T.mul(T.sum_(a, axis=1, keepdims=True), a)), [a]),
        "max": (lambda: T.sum_(T.mul(T.max_(a, axis=1), w[:, 0])), [a]),
        "gather_rows": (lambda: T.sum_(T.tanh(T.gather_rows(table, idx))), [table]),
        "pick": (lambda: T.sum_(T.mul(T.pick(a, [0, 3, 1]), w[:, 1])), [a]),
        "concat": (lambda: T.sum_(T.mul(T.concat([a, b], axis=1), w8)), [a, b]),
        "slice": (lambda: T.sum_(T.mul(a[:, 1:3], w[:, :2])), [a]),
        "reshape": (lambda: T.sum_(T.mul(T.reshape(a, (4, 3)), w.reshape(4, 3))), [a]),
        "masked_fill": (lambda: T.sum_(T.mul(T.softmax(T.masked_fill(a, mask)), w)), [a]),
        "clip": (lambda: T.sum_(T.mul(T.clip(a, -0.5, 0.5), w)), [a]),
        "minimum": (lambda: T.sum_(T.mul(T.minimum(a, b), w)), [a, b]),
        "huber": (lambda: T.sum_(T.huber(T.mul(a, 2.0))), [a]),
        "square": (lambda: T.sum_(T.mul(T.square(a), w)), [a]),
        "neg": (lambda: T.sum_(T.mul(T.neg(a), w)), [a]),
    }


PRIM_NAMES = sorted(_prims(np.random.default_rng(0)))


class TestFiniteDifferences:
    @pytest.mark.parametrize("name", PRIM_NAMES)
    def test_primitive(self, name):
        for seed in range(20):
            fn, leaves = _prims(np.random.default_rng(seed))[name]
            assert max_relative_error(fn, leaves) < 1e-4, (name, seed)

    def test_two_layer_mlp(self):
        for seed in range(20):
            fn, leaves = _mlp_loss(np.random.default_rng(seed))
            assert max_relative_error(fn, leaves) < 1e-4

    def test_numeric_grad_subset(self):
        rng = np.random.default_rng(0)
        w = leaf(rng, 4, 5)
        fn = lambda: T.sum_(T.mul(w, w))
        full = numeric_grad(fn, w, 1e-5)
        part = numeric_grad(fn, w, 1e-5, coords=[3, 7])
        np.testing.assert_allclose(full, 2 * w.data, rtol=1e-8)
        assert np.count_nonzero(part) == 2
        np.testing.assert_allclose(part.reshape(-1)[[3, 7]], full.reshape(-1)[[3, 7]])

    def test_subsampled_check_still_catches_wrong_gradient(self):
        rng = np.random.default_rng(1)
        w = leaf(rng, 30, scale=0.1)
        # the second term is built from raw data, so the tape misses its gradient of 1 per coordinate
        bad = lambda: T.add(T.sum_(T.mul(w, w)), Tensor(np.array(w.data.sum())))
        assert max_relative_error(bad, [w], max_coords=3) > 0.1


class TestGRU:
    def test_zero_params(self):
        p = GRUCellParams(3, 4, np.random.default_rng(0))
        for t in p.parameters():
            t.data[:] = 0.0
        h = gru_cell(Tensor(np.random.default_rng(1).normal(size=(2, 3))), Tensor(np.zeros((2, 4))), p)
        np.testing.assert_array_equal(h.data, np.zeros((2, 4)))

    def test_dim_mismatch(self):
        p = GRUCellParams(3, 4, np.random.default_rng(0))
        with pytest.raises(ContractViolation):
            gru_cell(Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 4))), p)

    def test_bounded(self):
        rng = np.random.default_rng(2)
        p = GRUCellParams(3, 4, rng)
        h = Tensor(np.zeros((5, 4)))
        for _ in range(10):
            h = gru_cell(Tensor(rng.normal(size=(5, 3)) * 10), h, p)
            assert np.all(np.abs(h.data) < 1)

    def test_three_chained_cells_gradcheck(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            p = GRUCellParams(3, 4, rng)
            xs = [leaf(rng, 2, 3) for _ in range(3)]
            w = rng.normal(size=(2, 4))

            def fn():
                h = Tensor(np.zeros((2, 4)))
                for x in xs:
                    h = gru_cell(x, h, p)
                return T.sum_(T.mul(h, w))

            assert max_relative_error(fn, p.parameters() + xs) < 1e-4


class TestOptim:
    def test_sgd_step(self):
        p = Tensor(1.0, requires_grad=True)
        p.grad = np.array(2.0)
        SGD([p], lr=0.1).step()
        assert p.item() == pytest.approx(0.8)

    @pytest.mark.parametrize("scale", [1e-3, 1.0, 1e3])
    def test_adam_first_step_magnitude(self, scale):
        p = Tensor(np.zeros(4), requires_grad=True)
        p.grad = np.full(4, scale)
        opt = Adam([p], lr=0.01)
        opt.step()
        np.testing.assert_allclose(np.abs(p.data), 0.01, rtol=1e-4)
        assert opt.step_count == 1

    def test_sgd_quadratic_converges(self):
        p = Tensor(0.0, requires_grad=True)
        opt = SGD([p], lr=0.1)
        for _ in range(100):
            with Tape() as tape:
                loss = T.square(T.sub(p, 4.0))
            backward(tape, loss)
            opt.step()
        # closed form: error shrinks by (1 - 2 lr) per step
        assert abs(p.item() - 4.0) == pytest.approx(4.0 * 0.8**100, rel=1e-6)
        assert abs(p.item() - 4.0) < 1e-3

    def test_missing_grad(self):
        p = Tensor(1.0, requires_grad=True)
        with pytest.raises(ContractViolation):
            SGD([p], lr=0.1).step()

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=8))
    def test_adam_stays_finite(self, gs):
        p = Tensor(np.zeros(len(gs)), requires_grad=True)
        opt = Adam([p], lr=1e-3)
        for _ in range(3):
            p.grad = np.array(gs)
            opt.step()
        assert np.all(np.isfinite(p.data))


class TestModule:
    def test_state_roundtrip(self):
        class Net(Module):
            def __init__(self, rng):
                super().__init__()
                self.a = Linear(2, 3, rng)
                self.b = Linear(3, 1, rng)

        n1, n2 = Net(np.random.default_rng(0)), Net(np.random.default_rng(1))
        assert [n for n, _ in n1.named_parameters()] == ["a.weight", "a.bias", "b.weight", "b.bias"]
        n2.copy_from(n1)
        for (_, p), (_, q) in zip(n1.named_parameters(), n2.named_parameters()):
            np.testing.assert_array_equal(p.data, q.data)

    def test_init_bounds(self):
        lin = Linear(16, 4, np.random.default_rng(0))
        assert np.all(np.abs(lin.weight.data) <= 0.25)
        np.testing.assert_array_equal(lin.bias.data, 0.0)

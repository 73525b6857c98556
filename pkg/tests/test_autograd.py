import numpy as np
import pytest

from seggen import autograd as ag

from gradcheck import check_op_gradient, finite_difference, relative_error


def _param(rng, *shape):
    return ag.parameter(rng.uniform(-1.0, 1.0, size=shape))


class TestMatmul:
    def test_identity(self):
        a = ag.Tensor(np.eye(2))
        b = ag.Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(ag.matmul(a, b).values, b.values)

    def test_hand_product(self):
        a = ag.Tensor([[1.0, 2.0]])
        b = ag.Tensor([[3.0], [4.0]])
        np.testing.assert_array_equal(ag.matmul(a, b).values, [[11.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ag.matmul(ag.Tensor(np.ones((2, 3))), ag.Tensor(np.ones((2, 3))))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        a = _param(rng, 3, 4)
        b = _param(rng, 4, 2)
        with ag.Tape() as tape:
            out = ag.tensor_sum(ag.matmul(a, b))
            tape.backward(out)

        def f(x):
            return float((x @ b.values).sum())

        num = finite_difference(f, a.values)
        assert relative_error(a.grad, num) <= 1e-6


class TestLogSumExp:
    def test_equal_mass(self):
        xs = ag.Tensor([np.log(1.0), np.log(1.0)])
        assert ag.log_sum_exp(xs).values == pytest.approx(np.log(2.0))

    def test_masked_element(self):
        xs = ag.Tensor([0.0, -np.inf])
        assert ag.log_sum_exp(xs).values == pytest.approx(0.0)

    def test_empty_errors(self):
        with pytest.raises(ValueError):
            ag.log_sum_exp(ag.Tensor(np.zeros(0)))

    def test_all_neg_inf_returns_neg_inf_zero_grad(self):
        xs = ag.parameter(np.array([-np.inf, -np.inf]))
        with ag.Tape() as tape:
            out = ag.log_sum_exp(xs)
            tape.backward(out)
        assert out.values == -np.inf
        np.testing.assert_array_equal(xs.grad, np.zeros(2))

    def test_gradient_is_softmax(self):
        xs = ag.parameter(np.array([0.3, -1.2, 2.0]))
        with ag.Tape() as tape:
            out = ag.log_sum_exp(xs)
            tape.backward(out)
        e = np.exp(xs.values - xs.values.max())
        np.testing.assert_allclose(xs.grad, e / e.sum(), atol=1e-9)

    def test_masked_slot_gets_exact_zero(self):
        xs = ag.parameter(np.array([1.0, -np.inf, 0.5]))
        with ag.Tape() as tape:
            out = ag.log_sum_exp(xs)
            tape.backward(out)
        assert xs.grad[1] == 0.0

    def test_axis_reduction_matches_scipy_convention(self):
        rng = np.random.default_rng(3)
        v = rng.normal(size=(4, 5))
        got = ag.logsumexp(ag.Tensor(v), axis=1).values
        want = np.log(np.exp(v - v.max(1, keepdims=True)).sum(1)) + v.max(1)
        np.testing.assert_allclose(got, want, atol=1e-12)


class TestSoftmax:
    def test_rows_normalize(self):
        rng = np.random.default_rng(7)
        p = ag.softmax(ag.Tensor(rng.normal(size=(20, 9))), axis=1).values
        assert (p >= 0).all()
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


class TestLstmCell:
    def _weights(self, rng, din, d):
        return (
            _param(rng, din, 4 * d),
            _param(rng, d, 4 * d),
            ag.parameter(np.zeros(4 * d)),
        )

    def test_zero_weights_zero_state_gives_zero_h(self):
        din, d = 3, 4
        wx = ag.Tensor(np.zeros((din, 4 * d)))
        wh = ag.Tensor(np.zeros((d, 4 * d)))
        b = ag.Tensor(np.zeros(4 * d))
        x = ag.Tensor(np.random.default_rng(1).normal(size=(2, din)))
        h = ag.Tensor(np.zeros((2, d)))
        c = ag.Tensor(np.zeros((2, d)))
        h2, c2 = ag.lstm_cell(x, h, c, wx, wh, b)
        np.testing.assert_array_equal(h2.values, np.zeros((2, d)))
        np.testing.assert_array_equal(c2.values, np.zeros((2, d)))

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        wx, wh, b = self._weights(rng, 3, 4)
        x = ag.Tensor(rng.normal(size=(2, 3)))
        h = ag.Tensor(rng.normal(size=(2, 4)))
        c = ag.Tensor(rng.normal(size=(2, 4)))
        h1, c1 = ag.lstm_cell(x, h, c, wx, wh, b)
        h2, c2 = ag.lstm_cell(x, h, c, wx, wh, b)
        np.testing.assert_array_equal(h1.values, h2.values)
        np.testing.assert_array_equal(c1.values, c2.values)

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(5)
        wx, wh, b = self._weights(rng, 3, 4)
        x = ag.Tensor(rng.normal(size=(2, 7)))
        h = ag.Tensor(np.zeros((2, 4)))
        with pytest.raises(ValueError):
            ag.lstm_cell(x, h, h, wx, wh, b)

    def test_gradient_wrt_input(self):
        rng = np.random.default_rng(9)
        wx, wh, b = self._weights(rng, 3, 4)
        x = ag.parameter(rng.normal(size=(2, 3)))
        hv = rng.normal(size=(2, 4))
        cv = rng.normal(size=(2, 4))
        with ag.Tape() as tape:
            h2, _ = ag.lstm_cell(x, ag.Tensor(hv), ag.Tensor(cv), wx, wh, b)
            tape.backward(ag.tensor_sum(h2))

        def f(xv):
            h2, _ = ag.lstm_cell(
                ag.Tensor(xv), ag.Tensor(hv), ag.Tensor(cv), wx, wh, b
            )
            return float(h2.values.sum())

        num = finite_difference(f, x.values)
        assert relative_error(x.grad, num) <= 1e-4


class TestDropout:
    def test_rate_zero_identity(self):
        x = ag.Tensor(np.arange(6, dtype=np.float64))
        out = ag.dropout(x, 0.0, training=True, rng=np.random.default_rng(0))
        assert out is x

    def test_eval_passthrough(self):
        x = ag.Tensor(np.arange(6, dtype=np.float64))
        out = ag.dropout(x, 0.5, training=False, rng=np.random.default_rng(0))
        assert out is x

    def test_bad_rate(self):
        x = ag.Tensor(np.zeros(3))
        for rate in (-0.1, 1.0, 1.5):
            with pytest.raises(ValueError):
                ag.dropout(x, rate, training=True, rng=np.random.default_rng(0))

    def test_monte_carlo_mean_preserved(self):
        # inverted dropout keeps the expected value; 10k trials, 5% tolerance
        rng = np.random.default_rng(42)
        x = ag.Tensor(np.full(16, 2.0))
        total = 0.0
        trials = 10_000
        for _ in range(trials):
            total += ag.dropout(x, 0.5, training=True, rng=rng).values.mean()
        assert total / trials == pytest.approx(2.0, rel=0.05)


class TestTapeDiscipline:
    def test_backward_twice_errors(self):
        x = ag.parameter(np.array([1.0]))
        with ag.Tape() as tape:
            y = ag.tensor_sum(ag.mul(x, x))
            tape.backward(y)
            with pytest.raises(RuntimeError):
                tape.backward(y)

    def test_non_participating_tensor_has_zero_grad(self):
        x = ag.parameter(np.array([1.0, 2.0]))
        bystander = ag.parameter(np.array([5.0]))
        with ag.Tape() as tape:
            y = ag.tensor_sum(ag.mul(x, x))
            tape.backward(y)
        np.testing.assert_array_equal(bystander.grad, np.zeros(1))

    def test_no_tape_records_nothing(self):
        x = ag.parameter(np.array([1.0, 2.0]))
        y = ag.tensor_sum(ag.mul(x, x))
        assert not y.requires_grad

    def test_nested_tape_rejected(self):
        with ag.Tape():
            with pytest.raises(RuntimeError):
                ag.Tape().__enter__()
        assert ag.active_tape() is None


class TestPrimitiveGradients:
    """Randomized finite-difference checks for every differentiable primitive."""

    @pytest.mark.parametrize("name", [
        "add", "sub", "mul", "matmul", "transpose", "reshape", "concat",
        "stack", "split", "index_select", "take_column", "sum", "cumsum",
        "logsumexp", "gather_lse", "log_softmax", "exp", "tanh", "relu",
        "sigmoid", "scale", "cast",
    ])
    def test_primitive(self, name):
        rng = np.random.default_rng(abs(hash(name)) % 2**32)
        a = _param(rng, 4, 5)
        b = _param(rng, 4, 5)
        m = _param(rng, 5, 3)
        idx = rng.integers(0, 4, size=6)
        gidx = rng.integers(0, 5, size=(4, 2))

        builders = {
            "add": lambda: ag.tensor_sum(ag.add(a, b)),
            "sub": lambda: ag.tensor_sum(ag.sub(a, b)),
            "mul": lambda: ag.tensor_sum(ag.mul(a, b)),
            "matmul": lambda: ag.tensor_sum(ag.matmul(a, m)),
            "transpose": lambda: ag.tensor_sum(ag.mul(ag.transpose(a), ag.transpose(b))),
            "reshape": lambda: ag.tensor_sum(ag.exp(ag.reshape(a, (2, 10)))),
            "concat": lambda: ag.tensor_sum(ag.tanh(ag.concat([a, b], axis=1))),
            "stack": lambda: ag.tensor_sum(ag.sigmoid(ag.stack([a, b], axis=0))),
            "split": lambda: ag.tensor_sum(ag.exp(ag.split(a, 2, axis=0)[1])),
            "index_select": lambda: ag.tensor_sum(ag.tanh(ag.index_select(a, idx))),
            "take_column": lambda: ag.tensor_sum(ag.exp(ag.take_column(a, 2))),
            "sum": lambda: ag.tensor_sum(ag.exp(ag.tensor_sum(a, axis=1))),
            "cumsum": lambda: ag.tensor_sum(ag.tanh(ag.cumsum(a, axis=1))),
            "logsumexp": lambda: ag.tensor_sum(ag.logsumexp(a, axis=1)),
            "gather_lse": lambda: ag.tensor_sum(ag.gather_lse(a, gidx)),
            "log_softmax": lambda: ag.tensor_sum(ag.mul(ag.log_softmax(a, axis=1), b)),
            "exp": lambda: ag.tensor_sum(ag.exp(a)),
            "tanh": lambda: ag.tensor_sum(ag.tanh(a)),
            "relu": lambda: ag.tensor_sum(ag.relu(a)),
            "sigmoid": lambda: ag.tensor_sum(ag.sigmoid(a)),
            "scale": lambda: ag.tensor_sum(ag.scale(a, 2.5)),
            "cast": lambda: ag.tensor_sum(ag.cast(a, np.float64)),
        }
        check_op_gradient(builders[name], {"a": a}, tol=1e-4)

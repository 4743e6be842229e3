import numpy as np
import pytest

from simtrace import tensor as T

RNG = np.random.default_rng(1234)


def finite_difference(fn, params, h=1e-5):
    """Central-difference gradients of a scalar-valued closure."""
    grads = []
    for p in params:
        flat = p.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            g[i] = (fp - fm) / (2 * h)
        grads.append(g.reshape(p.shape))
    return grads


def check_gradients(fn, params, tol=1e-6, h=1e-5):
    for p in params:
        p.zero_grad()
    with T.Tape() as tape:
        loss = fn()
    T.backward(tape, loss)
    numeric = finite_difference(fn, params, h)
    for p, num in zip(params, numeric):
        got = p.grad if p.grad is not None else np.zeros_like(p.data)
        denom = np.maximum(np.abs(num), 1e-6)
        rel = np.max(np.abs(got - num) / denom)
        assert rel < tol, f"{p.name or 'param'}: rel err {rel}"


def tensor(shape, scale=1.0, grad=True, name=""):
    return T.Tensor(RNG.normal(size=shape) * scale, requires_grad=grad, name=name)


class TestPrimitiveGradients:
    def test_add_mul_broadcast(self):
        a = tensor((3, 4), name="a")
        b = tensor((4,), name="b")
        check_gradients(lambda: T.tsum(T.mul(T.add(a, b), a)), [a, b])

    def test_sub_div(self):
        a = tensor((2, 5))
        b = T.Tensor(RNG.uniform(1.0, 2.0, size=(2, 5)), requires_grad=True)
        check_gradients(lambda: T.tsum(T.div(T.sub(a, b), b)), [a, b])

    def test_matmul(self):
        a = tensor((3, 4))
        b = tensor((4, 2))
        check_gradients(lambda: T.tsum(T.square(T.matmul(a, b))), [a, b])

    def test_reductions(self):
        a = tensor((4, 5))
        check_gradients(lambda: T.tsum(T.square(T.tmean(a, axis=1))), [a])
        check_gradients(lambda: T.tsum(T.tsum(a, axis=0, keepdims=True)), [a])

    def test_nonlinearities(self):
        a = tensor((3, 3), scale=0.8)
        for op in (T.tanh, T.sigmoid, T.softplus, T.relu):
            check_gradients(lambda op=op: T.tsum(T.square(op(a))), [a])

    def test_exp_log(self):
        a = T.Tensor(RNG.uniform(0.5, 2.0, size=(6,)), requires_grad=True)
        check_gradients(lambda: T.tsum(T.log(T.add(T.exp(a), a))), [a])

    def test_softmax_logsumexp_logsoftmax(self):
        a = tensor((4, 6))
        weights = T.Tensor(RNG.normal(size=(4, 6)))
        check_gradients(lambda: T.tsum(T.square(T.softmax(a, axis=1))), [a])
        check_gradients(lambda: T.tsum(T.logsumexp(a, axis=1)), [a], tol=1e-5)
        check_gradients(lambda: T.tsum(T.mul(T.log_softmax(a, axis=1), weights)), [a])

    def test_normal_cdf(self):
        a = tensor((5,))
        check_gradients(lambda: T.tsum(T.square(T.normal_cdf(a))), [a])

    def test_concat_narrow_reshape(self):
        a = tensor((2, 3))
        b = tensor((2, 4))
        def fn():
            c = T.concat([a, b], axis=1)
            return T.tsum(T.square(T.narrow(c, 1, 2, 3)))
        check_gradients(fn, [a, b])
        check_gradients(lambda: T.tsum(T.square(T.reshape(a, (3, 2)))), [a])

    def test_embedding(self):
        table = tensor((6, 3))
        idx = np.array([0, 2, 2, 5])
        check_gradients(lambda: T.tsum(T.square(T.embedding(table, idx))), [table])


class TestConv3d:
    def test_scalar_kernel(self):
        x = T.Tensor(np.full((1, 1, 1, 1, 1), 2.0))
        k = T.Tensor(np.full((1, 1, 1, 1, 1), 3.0))
        out = T.conv3d(x, k)
        assert out.data.reshape(()) == pytest.approx(6.0)

    def test_identity_kernel_same_padding(self):
        x = T.Tensor(RNG.normal(size=(1, 1, 4, 4, 4)))
        k = np.zeros((1, 1, 3, 3, 3))
        k[0, 0, 1, 1, 1] = 1.0
        out = T.conv3d(x, T.Tensor(k), padding=1)
        assert np.allclose(out.data, x.data, atol=1e-15)

    def test_against_naive_loops(self):
        x = RNG.normal(size=(1, 1, 4, 4, 4))
        k = RNG.normal(size=(2, 1, 3, 3, 3))
        out = T.conv3d(T.Tensor(x), T.Tensor(k)).data
        ref = np.zeros((1, 2, 2, 2, 2))
        for o in range(2):
            for d in range(2):
                for h in range(2):
                    for w in range(2):
                        acc = 0.0
                        for i in range(3):
                            for j in range(3):
                                for l in range(3):
                                    acc += x[0, 0, d + i, h + j, w + l] * k[o, 0, i, j, l]
                        ref[0, o, d, h, w] = acc
        assert np.max(np.abs(out - ref)) < 1e-12

    def test_stride_and_channels(self):
        x = RNG.normal(size=(2, 3, 6, 6, 6))
        k = RNG.normal(size=(4, 3, 3, 3, 3))
        out = T.conv3d(T.Tensor(x), T.Tensor(k), stride=2).data
        assert out.shape == (2, 4, 2, 2, 2)
        # spot-check one output element against the direct sum
        acc = 0.0
        for c in range(3):
            for i in range(3):
                for j in range(3):
                    for l in range(3):
                        acc += x[1, c, 2 + i, 2 + j, 0 + l] * k[3, c, i, j, l]
        assert out[1, 3, 1, 1, 0] == pytest.approx(acc, rel=1e-12)

    def test_gradients(self):
        x = tensor((1, 2, 4, 4, 4), scale=0.5, name="x")
        k = tensor((2, 2, 3, 3, 3), scale=0.5, name="k")
        check_gradients(lambda: T.tsum(T.square(T.conv3d(x, k, padding=1))), [x, k])

    def test_shape_errors(self):
        with pytest.raises(T.ShapeError):
            T.conv3d(T.Tensor(np.zeros((2, 2))), T.Tensor(np.zeros((1, 1, 1, 1, 1))))
        with pytest.raises(T.ShapeError):
            T.conv3d(T.Tensor(np.zeros((1, 2, 4, 4, 4))),
                     T.Tensor(np.zeros((1, 3, 3, 3, 3))))


class TestMaxpool:
    def test_forward_values(self):
        x = np.arange(16.0).reshape(1, 1, 2, 2, 4)
        out = T.maxpool3d(T.Tensor(x), 2).data
        assert out.shape == (1, 1, 1, 1, 2)
        assert out[0, 0, 0, 0, 0] == 13.0  # max over the first 2x2x2 block
        assert out[0, 0, 0, 0, 1] == 15.0

    def test_gradients(self):
        x = tensor((1, 2, 4, 4, 2), name="x")
        check_gradients(lambda: T.tsum(T.square(T.maxpool3d(x, 2))), [x])


class TestLstmCell:
    def make(self, batch=2, n_in=3, hidden=4, scale=0.4):
        x = tensor((batch, n_in), scale=scale, name="x")
        h = tensor((batch, hidden), scale=scale, name="h")
        c = tensor((batch, hidden), scale=scale, name="c")
        W = tensor((n_in, 4 * hidden), scale=scale, name="W")
        U = tensor((hidden, 4 * hidden), scale=scale, name="U")
        b = tensor((4 * hidden,), scale=scale, name="b")
        return x, h, c, W, U, b

    def test_all_zero(self):
        x, h, c, W, U, b = [T.Tensor(np.zeros_like(t.data)) for t in self.make()]
        h2, c2 = T.lstm_cell(x, h, c, W, U, b)
        assert np.all(h2.data == 0.0)
        assert np.all(c2.data == 0.0)

    def test_forget_gate_saturation(self):
        x, h, c, W, U, b = self.make()
        hidden = h.shape[1]
        bias = np.zeros(4 * hidden)
        bias[hidden:2 * hidden] = 60.0  # forget gate -> 1
        bias[0:hidden] = -60.0  # input gate -> 0
        h2, c2 = T.lstm_cell(x, h, c, T.Tensor(np.zeros_like(W.data)),
                             T.Tensor(np.zeros_like(U.data)), T.Tensor(bias))
        assert np.allclose(c2.data, c.data, atol=1e-12)

    def test_gradients_8_unit_cell(self):
        x = tensor((2, 3), name="x")
        h = tensor((2, 8), name="h")
        c = tensor((2, 8), name="c")
        W = tensor((3, 32), scale=0.3, name="W")
        U = tensor((8, 32), scale=0.3, name="U")
        b = tensor((32,), scale=0.3, name="b")

        def fn():
            h2, c2 = T.lstm_cell(x, h, c, W, U, b)
            h3, c3 = T.lstm_cell(x, h2, c2, W, U, b)
            return T.tsum(T.mul(h3, T.tanh(c3)))

        check_gradients(fn, [x, h, c, W, U, b])


class TestBackwardSemantics:
    def test_non_scalar_loss_rejected(self):
        a = tensor((3,))
        with T.Tape() as tape:
            y = T.square(a)
        with pytest.raises(T.ShapeError):
            T.backward(tape, y)

    def test_detached_subgraph_zero_grad(self):
        a = tensor((3,), name="a")
        b = tensor((3,), name="b")
        with T.Tape() as tape:
            y = T.tsum(T.add(T.square(a).detach(), T.square(b)))
        T.backward(tape, y)
        assert a.grad is None
        assert b.grad is not None

    def test_grad_accumulates_across_backwards(self):
        a = tensor((2,))
        def run():
            with T.Tape() as tape:
                loss = T.tsum(T.square(a))
            T.backward(tape, loss)
        run()
        g1 = a.grad.copy()
        run()
        assert np.allclose(a.grad, 2 * g1)

    def test_bit_identical_backward(self):
        a = tensor((4, 4), name="a")
        b = tensor((4, 4), name="b")

        def run():
            a.zero_grad()
            b.zero_grad()
            with T.Tape() as tape:
                loss = T.tsum(T.mul(T.softmax(T.matmul(a, b), axis=1), T.tanh(a)))
            T.backward(tape, loss)
            return a.grad.copy(), b.grad.copy()

        ga1, gb1 = run()
        ga2, gb2 = run()
        assert np.array_equal(ga1, ga2)
        assert np.array_equal(gb1, gb2)

    def test_no_tape_means_no_recording(self):
        a = tensor((2, 2))
        y = T.square(a)  # outside any tape
        assert y.requires_grad is False

    def test_each_node_visited_once(self):
        a = tensor((3,), name="a")
        with T.Tape() as tape:
            b = T.square(a)
            loss = T.tsum(T.add(b, b))  # b feeds two slots of one op
        T.backward(tape, loss)
        assert np.allclose(a.grad, 4 * a.data)
        assert len(tape) == 3

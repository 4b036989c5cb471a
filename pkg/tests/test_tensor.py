import numpy as np
import pytest

from ecapa_tdnn import tensor as tn
from ecapa_tdnn.gradcheck import TOLERANCE, check_gradients
from ecapa_tdnn.tensor import Tensor


def naive_conv1d(x, w, b, d):
    """Triple-loop 'same' cross-correlation with explicit zero padding."""
    cin, T = x.shape
    cout, _, k = w.shape
    pad = (k - 1) * d // 2
    xp = np.zeros((cin, T + 2 * pad))
    xp[:, pad:pad + T] = x
    y = np.zeros((cout, T))
    for c in range(cout):
        for t in range(T):
            acc = b[c]
            for i in range(cin):
                for j in range(k):
                    acc += w[c, i, j] * xp[i, t + pad + (j - k // 2) * d]
            y[c, t] = acc
    return y


class TestConv1d:
    def test_identity_kernel(self):
        y = tn.conv1d(Tensor([[1.0, 2, 3, 4]]), Tensor([[[1.0]]]), Tensor([0.0]))
        np.testing.assert_array_equal(y.data, [[1, 2, 3, 4]])

    def test_difference_kernel(self):
        y = tn.conv1d(Tensor([[1.0, 2, 3, 4]]), Tensor([[[1.0, 0, -1]]]), Tensor([0.0]), dilation=1)
        np.testing.assert_array_equal(y.data, [[-2, -2, -2, 3]])

    def test_dilated_box_kernel(self):
        x = np.array([[1.0, 0, 0, 0, 1]])
        w = np.array([[[1.0, 1, 1]]])
        y = tn.conv1d(Tensor(x), Tensor(w), Tensor([0.0]), dilation=2)
        expected = naive_conv1d(x, w, [0.0], 2)
        np.testing.assert_array_equal(expected, [[1, 0, 2, 0, 1]])
        np.testing.assert_array_equal(y.data, expected)

    @pytest.mark.parametrize("k,d", [(1, 1), (3, 1), (3, 2), (5, 1), (3, 4), (5, 3)])
    def test_matches_naive_oracle(self, k, d):
        rng = np.random.default_rng(k * 10 + d)
        x = rng.normal(size=(3, 9))
        w = rng.normal(size=(4, 3, k))
        b = rng.normal(size=4)
        y = tn.conv1d(Tensor(x), Tensor(w), Tensor(b), d)
        assert y.shape == (4, 9)
        np.testing.assert_allclose(y.data, naive_conv1d(x, w, b, d), rtol=0, atol=1e-12)

    def test_batched_equals_unbatched(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 3, 7))
        w, b = Tensor(rng.normal(size=(5, 3, 3))), Tensor(rng.normal(size=5))
        yb = tn.conv1d(Tensor(x), w, b, 2).data
        for i in range(2):
            np.testing.assert_allclose(yb[i], tn.conv1d(Tensor(x[i]), w, b, 2).data, atol=1e-12)

    def test_errors(self):
        x = Tensor(np.ones((2, 5)))
        with pytest.raises(ValueError, match="channel mismatch"):
            tn.conv1d(x, Tensor(np.ones((1, 3, 3))))
        with pytest.raises(ValueError, match="odd"):
            tn.conv1d(x, Tensor(np.ones((1, 2, 2))))
        with pytest.raises(ValueError, match="T >= 1"):
            tn.conv1d(Tensor(np.ones((1, 2, 0))), Tensor(np.ones((1, 2, 3))))


class TestDense:
    def test_identity(self):
        x = np.array([[1.0, 2], [3, 4], [5, 6]])
        y = tn.dense(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(y.data, x)

    def test_hand_sum(self):
        y = tn.dense(Tensor([2.0, 3.0]), Tensor([[1.0, 1.0]]), Tensor([0.0]))
        np.testing.assert_array_equal(y.data, [5.0])

    def test_random_vs_loop(self):
        rng = np.random.default_rng(3)
        W, b, x = rng.normal(size=(3, 4)), rng.normal(size=3), rng.normal(size=(4, 6))
        expected = np.array([[sum(W[o, i] * x[i, t] for i in range(4)) + b[o] for t in range(6)] for o in range(3)])
        np.testing.assert_allclose(tn.dense(Tensor(x), Tensor(W), Tensor(b)).data, expected, atol=1e-12)
        xb = rng.normal(size=(2, 4, 6))
        yb = tn.dense(Tensor(xb), Tensor(W), Tensor(b), axis=1).data
        np.testing.assert_allclose(yb[1], tn.dense(Tensor(xb[1]), Tensor(W), Tensor(b)).data, atol=1e-12)

    def test_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            tn.dense(Tensor(np.ones(3)), Tensor(np.ones((2, 4))))


def _bn(x, training=True, gamma=None, beta=None, rm=None, rv=None):
    C = x.shape[1]
    g = Tensor(np.ones(C) if gamma is None else gamma)
    b = Tensor(np.zeros(C) if beta is None else beta)
    rm = np.zeros(C) if rm is None else rm
    rv = np.ones(C) if rv is None else rv
    return tn.batchnorm1d(Tensor(x), g, b, rm, rv, training)


class TestBatchNorm:
    def test_constant_input_gives_beta(self):
        beta = np.array([0.3, -1.0])
        y = _bn(np.full((2, 2, 5), 7.0), beta=beta)
        np.testing.assert_allclose(y.data, np.broadcast_to(beta[None, :, None], (2, 2, 5)))

    def test_two_values(self):
        y = _bn(np.array([[[1.0, 3.0]]]))
        # var = 1, eps correction: 1/sqrt(1 + 1e-5)
        np.testing.assert_allclose(y.data.ravel(), [-1, 1], rtol=1e-5)
        np.testing.assert_allclose(y.data.ravel(), np.array([-1, 1]) / np.sqrt(1 + 1e-5), rtol=1e-12)

    def test_eval_identity_stats_is_affine(self):
        x = np.random.default_rng(0).normal(size=(3, 2, 4))
        y = _bn(x, training=False, gamma=np.array([2.0, 3.0]), beta=np.array([1.0, -1.0]))
        expected = x / np.sqrt(1 + 1e-5) * np.array([2.0, 3.0])[None, :, None] + np.array([1.0, -1.0])[None, :, None]
        np.testing.assert_allclose(y.data, expected, atol=1e-12)

    def test_train_statistics(self):
        rng = np.random.default_rng(5)
        x = rng.normal(3.0, 4.0, size=(4, 6, 50))
        y = _bn(x).data
        assert np.all(np.abs(y.mean(axis=(0, 2))) < 1e-5)
        assert np.all(np.abs(y.var(axis=(0, 2)) - 1) < 1e-4)

    def test_running_update(self):
        x = np.random.default_rng(2).normal(2.0, 1.0, size=(4, 3, 10))
        rm, rv = np.zeros(3), np.ones(3)
        _bn(x, rm=rm, rv=rv)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2)))
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2)))

    def test_zero_time(self):
        with pytest.raises(ValueError):
            _bn(np.ones((2, 2, 0)))


class TestActivations:
    def test_softmax_uniform(self):
        np.testing.assert_allclose(tn.softmax_over_time(Tensor(np.full((1, 4), 2.0))).data, [[0.25] * 4])

    def test_sigmoid_zero(self):
        assert tn.sigmoid(Tensor(0.0)).data == 0.5

    def test_softmax_closed_form(self):
        np.testing.assert_allclose(tn.softmax_over_time(Tensor([[0.0, np.log(3.0)]])).data, [[0.25, 0.75]], atol=1e-15)

    def test_softmax_overflow_safe(self):
        y = tn.softmax_over_time(Tensor([[1000.0, 1000.0, -1000.0]])).data
        np.testing.assert_allclose(y, [[0.5, 0.5, 0.0]])

    def test_ranges(self):
        x = np.random.default_rng(0).normal(0, 10, size=(5, 30))
        s = tn.softmax_over_time(Tensor(x)).data
        np.testing.assert_allclose(s.sum(axis=-1), 1, atol=1e-6)
        assert np.all(tn.relu(Tensor(x)).data >= 0)
        sig = tn.sigmoid(Tensor(x / 10)).data
        assert np.all((sig > 0) & (sig < 1))

    def test_softmax_shift_invariance(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(4, 7))
        shifted = x + rng.normal(0, 50, size=(4, 1))
        np.testing.assert_allclose(tn.softmax_over_time(Tensor(x)).data,
                                   tn.softmax_over_time(Tensor(shifted)).data, atol=1e-9)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)), requires_grad=True)
        tn.sum(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_relu_sign_cases(self):
        x = Tensor([-1.0, 2.0], requires_grad=True)
        tn.sum(tn.relu(x)).backward()
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            (x * 2.0).backward()

    def test_disconnected_parameter_zero_grad(self):
        x = Tensor(np.ones(3), requires_grad=True)
        unused = Tensor(np.ones(2), requires_grad=True)
        g = tn.grad(tn.sum(x * x), [x, unused])
        np.testing.assert_array_equal(g[1], np.zeros(2))

    def test_shared_node_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        y = x * x
        tn.sum(y + y).backward()
        np.testing.assert_allclose(x.grad, [12.0])

    def test_composed_conv_softmax_weighted_sum(self):
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(2, 3, 8)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        r = rng.normal(size=(2, 3, 8))
        errs = check_gradients(lambda: tn.sum(tn.softmax_over_time(tn.conv1d(x, w, b, 2)) * r),
                               {"x": x, "w": w, "b": b})
        assert max(c.error for c in errs.values()) < TOLERANCE

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with tn.no_grad():
            y = x * 2.0
        assert not y.requires_grad


def _random_op_case(op, rng):
    """(loss_fn, tensors) for one random instance of a primitive op."""
    B, C, T = rng.integers(1, 4), rng.integers(1, 5), rng.integers(1, 9)
    x = Tensor(rng.normal(size=(B, C, T)), requires_grad=True)
    r = rng.normal(size=(B, C, T))
    if op == "conv1d":
        k = int(rng.choice([1, 3, 5]))
        d = int(rng.integers(1, 4))
        cout = int(rng.integers(1, 5))
        w = Tensor(rng.normal(size=(cout, C, k)), requires_grad=True)
        b = Tensor(rng.normal(size=cout), requires_grad=True)
        r = rng.normal(size=(B, cout, T))
        return (lambda: tn.sum(tn.conv1d(x, w, b, d) * r)), {"x": x, "w": w, "b": b}
    if op == "dense":
        cout = int(rng.integers(1, 5))
        w = Tensor(rng.normal(size=(cout, C)), requires_grad=True)
        b = Tensor(rng.normal(size=cout), requires_grad=True)
        r = rng.normal(size=(B, cout, T))
        return (lambda: tn.sum(tn.dense(x, w, b, axis=1) * r)), {"x": x, "w": w, "b": b}
    if op == "batchnorm1d":
        x = Tensor(rng.normal(size=(B + 1, C, T + 1)), requires_grad=True)
        g = Tensor(rng.uniform(0.5, 2, C), requires_grad=True)
        be = Tensor(rng.normal(size=C), requires_grad=True)
        r = rng.normal(size=x.shape)
        training = bool(rng.integers(0, 2))
        rm, rv = rng.normal(size=C), rng.uniform(0.5, 2, C)
        return (lambda: tn.sum(tn.batchnorm1d(x, g, be, rm.copy(), rv.copy(), training) * r)), \
            {"x": x, "gamma": g, "beta": be}
    if op == "relu":
        return (lambda: tn.sum(tn.relu(x) * r)), {"x": x}
    if op == "sigmoid":
        return (lambda: tn.sum(tn.sigmoid(x) * r)), {"x": x}
    if op == "softmax_over_time":
        return (lambda: tn.sum(tn.softmax_over_time(x) * r)), {"x": x}
    if op == "pooling_primitives":
        # mean/sqrt/clamp/concat/broadcast as used by the pooling layer
        def f():
            mu = tn.mean(x, axis=2, keepdims=True)
            var = tn.mean(x * x, axis=2, keepdims=True) - mu * mu
            sd = tn.sqrt(tn.clamp_min(var, 1e-6))
            out = tn.concat([x, tn.broadcast_to(mu, x.shape), tn.broadcast_to(sd, x.shape)], axis=1)
            return tn.sum(out * np.concatenate([r, r, r], axis=1))
        return f, {"x": x}
    raise AssertionError(op)


@pytest.mark.parametrize("op", ["conv1d", "dense", "batchnorm1d", "relu", "sigmoid", "softmax_over_time",
                                "pooling_primitives"])
def test_gradient_check_100_random_instances(op):
    rng = np.random.default_rng(hash(op) % 2**32)
    worst = 0.0
    for _ in range(100):
        loss_fn, tensors = _random_op_case(op, rng)
        for c in check_gradients(loss_fn, tensors, max_entries=20, rng=rng).values():
            if c.probed > c.skipped:
                worst = max(worst, c.error)
    assert worst < TOLERANCE


def test_forward_outputs_finite():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(0, 100, size=(2, 3, 6)))
    for y in (tn.relu(x), tn.sigmoid(x), tn.softmax_over_time(x),
              tn.conv1d(x, Tensor(rng.normal(size=(2, 3, 3))), Tensor(np.zeros(2)), 2)):
        assert np.all(np.isfinite(y.data))

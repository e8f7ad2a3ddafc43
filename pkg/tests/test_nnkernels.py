import numpy as np
import pytest

from silentwear import nnkernels as nk
from silentwear.errors import GraphNotRecorded, LabelOutOfRange, ShapeMismatch
from silentwear.nnkernels import AdamState, Mode, Padding, RunningStats, Tape

H = 1e-5
TOL = 1e-4


def numeric_grad(f, x):
    """Central differences of scalar ``f`` with respect to ``x`` (modified in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + H
        fp = f()
        x[i] = old - H
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * H)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)) + np.max(np.abs(b)))


@pytest.fixture
def rng64():
    return np.random.default_rng(42)


class TestConv2d:
    @pytest.mark.parametrize("padding,kernel", [
        (Padding.VALID, (2, 3)),
        (Padding.SAME_TIME, (1, 4)),
        (Padding.SAME_TIME, (1, 5)),
    ])
    def test_gradients(self, rng64, padding, kernel):
        x = rng64.standard_normal((2, 3, 4, 9))
        w = rng64.standard_normal((2, 3, *kernel))
        b = rng64.standard_normal(2)
        r = rng64.standard_normal(nk.conv2d_forward(x, w, b, padding)[0].shape)

        def loss():
            return float((nk.conv2d_forward(x, w, b, padding)[0] * r).sum())

        _, cache = nk.conv2d_forward(x, w, b, padding)
        dx, dw, db = nk.conv2d_backward(r, cache)
        assert rel_err(dx, numeric_grad(loss, x)) < TOL
        assert rel_err(dw, numeric_grad(loss, w)) < TOL
        assert rel_err(db, numeric_grad(loss, b)) < TOL

    def test_same_time_keeps_width(self, rng64):
        x = rng64.standard_normal((1, 1, 14, 400))
        y, _ = nk.conv2d_forward(x, rng64.standard_normal((8, 1, 1, 4)), np.zeros(8),
                                 Padding.SAME_TIME)
        assert y.shape == (1, 8, 14, 400)

    def test_even_kernel_pads_right(self):
        assert nk.same_time_pad(4) == (1, 2)
        assert nk.same_time_pad(5) == (2, 2)

    def test_channel_mismatch(self, rng64):
        with pytest.raises(ShapeMismatch):
            nk.conv2d_forward(rng64.standard_normal((1, 2, 4, 4)),
                              rng64.standard_normal((3, 1, 1, 1)), np.zeros(3))


class TestBatchNorm:
    @pytest.mark.parametrize("mode", [Mode.TRAIN, Mode.EVAL])
    def test_gradients(self, rng64, mode):
        x = rng64.standard_normal((3, 2, 2, 5))
        gamma = rng64.uniform(0.5, 1.5, 2)
        beta = rng64.standard_normal(2)
        running = RunningStats(rng64.standard_normal(2), rng64.uniform(0.5, 2.0, 2))
        r = rng64.standard_normal(x.shape)

        def loss():
            return float((nk.batchnorm2d_forward(x, gamma, beta, running, mode)[0] * r).sum())

        _, _, cache = nk.batchnorm2d_forward(x, gamma, beta, running, mode)
        dx, dgamma, dbeta = nk.batchnorm2d_backward(r, cache)
        assert rel_err(dx, numeric_grad(loss, x)) < TOL
        assert rel_err(dgamma, numeric_grad(loss, gamma)) < TOL
        assert rel_err(dbeta, numeric_grad(loss, beta)) < TOL

    def test_running_stats_update(self, rng64):
        x = rng64.standard_normal((4, 3, 2, 6)) + 2.0
        running = RunningStats(np.zeros(3), np.ones(3))
        _, updated, _ = nk.batchnorm2d_forward(x, np.ones(3), np.zeros(3), running, Mode.TRAIN,
                                               momentum=0.1)
        m = 4 * 2 * 6
        expected_var = 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1)
        np.testing.assert_allclose(updated.mean, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(updated.var, expected_var)
        np.testing.assert_array_equal(running.mean, np.zeros(3))

    def test_eval_leaves_stats(self, rng64):
        running = RunningStats(np.zeros(2), np.ones(2))
        _, updated, _ = nk.batchnorm2d_forward(rng64.standard_normal((2, 2, 1, 3)),
                                               np.ones(2), np.zeros(2), running, Mode.EVAL)
        assert updated is running


class TestPoolingAndDense:
    def test_maxpool_gradient(self, rng64):
        x = rng64.standard_normal((2, 2, 3, 10))
        r = rng64.standard_normal((2, 2, 3, 2))

        def loss():
            return float((nk.maxpool2d_forward(x, (1, 4))[0] * r).sum())

        _, cache = nk.maxpool2d_forward(x, (1, 4))
        assert rel_err(nk.maxpool2d_backward(r, cache), numeric_grad(loss, x)) < TOL

    def test_maxpool_floor_and_ties(self):
        x = np.zeros((1, 1, 1, 9))
        y, cache = nk.maxpool2d_forward(x, (1, 4))
        assert y.shape == (1, 1, 1, 2)
        dx = nk.maxpool2d_backward(np.ones_like(y), cache)
        assert dx[0, 0, 0].tolist() == [1, 0, 0, 0, 1, 0, 0, 0, 0]

    def test_identity_pool(self, rng64):
        x = rng64.standard_normal((1, 2, 3, 4))
        y, cache = nk.maxpool2d_forward(x, (1, 1))
        assert y is x and cache is None

    def test_adaptive_avg_pool_gradient(self, rng64):
        x = rng64.standard_normal((2, 3, 2, 3))
        r = rng64.standard_normal((2, 3, 1, 1))

        def loss():
            return float((nk.adaptive_avg_pool_forward(x)[0] * r).sum())

        dx = nk.adaptive_avg_pool_backward(r, x.shape)
        assert rel_err(dx, numeric_grad(loss, x)) < TOL

    def test_dense_gradients(self, rng64):
        x = rng64.standard_normal((3, 5))
        w = rng64.standard_normal((5, 4))
        b = rng64.standard_normal(4)
        r = rng64.standard_normal((3, 4))

        def loss():
            return float((nk.dense_forward(x, w, b)[0] * r).sum())

        _, cache = nk.dense_forward(x, w, b)
        dx, dw, db = nk.dense_backward(r, cache)
        assert rel_err(dx, numeric_grad(loss, x)) < TOL
        assert rel_err(dw, numeric_grad(loss, w)) < TOL
        assert rel_err(db, numeric_grad(loss, b)) < TOL

    def test_dense_single_vector(self, rng64):
        y, _ = nk.dense_forward(rng64.standard_normal(5), np.eye(5, 3), np.zeros(3))
        assert y.shape == (3,)


class TestLoss:
    def test_cross_entropy_gradient(self, rng64):
        z = rng64.standard_normal((4, 9))
        y = np.array([0, 3, 8, 3])

        def loss():
            return nk.softmax_cross_entropy(z, y)[0]

        _, grad = nk.softmax_cross_entropy(z, y)
        assert rel_err(grad, numeric_grad(loss, z)) < TOL

    def test_uniform_logits(self):
        loss, _ = nk.softmax_cross_entropy(np.zeros((2, 9)), [1, 2])
        assert loss == pytest.approx(np.log(9))

    def test_stable_for_large_logits(self):
        loss, grad = nk.softmax_cross_entropy(np.array([[1000.0, 0.0]]), [0])
        assert np.isfinite(loss) and np.all(np.isfinite(grad))

    def test_label_out_of_range(self):
        with pytest.raises(LabelOutOfRange):
            nk.softmax_cross_entropy(np.zeros((1, 9)), [9])

    def test_softmax_sums_to_one(self, rng64):
        p = nk.softmax(rng64.standard_normal((5, 9)) * 10)
        np.testing.assert_allclose(p.sum(axis=1), 1.0)


class TestTape:
    def test_backward_without_forward(self):
        with pytest.raises(GraphNotRecorded):
            Tape().backward(np.ones(3))

    def test_chain_matches_finite_differences(self, rng64):
        x = rng64.standard_normal((2, 1, 3, 8))
        w = rng64.standard_normal((2, 1, 1, 3))
        b = rng64.standard_normal(2)
        dw_ = rng64.standard_normal((2, 4))
        labels = np.array([1, 2])

        def run(tape=None):
            h = nk.conv2d(x, w, b, Padding.SAME_TIME, tape=tape, key="c")
            h = nk.relu(h, tape=tape)
            h = nk.maxpool2d(h, (1, 2), tape=tape)
            h = nk.adaptive_avg_pool(h, tape=tape)
            h = nk.flatten(h, tape=tape)
            return nk.dense(h, dw_, np.zeros(4), tape=tape, key="d")

        tape = Tape()
        loss, grad = nk.softmax_cross_entropy(run(tape), labels)
        grads = tape.backward(grad)
        numeric = numeric_grad(lambda: nk.softmax_cross_entropy(run(), labels)[0], w)
        assert rel_err(grads.params["c.weight"], numeric) < TOL
        assert set(grads.params) == {"c.weight", "c.bias", "d.weight", "d.bias"}


class TestAdam:
    def test_first_step_moves_by_lr(self):
        params = {"w": np.array([1.0, -1.0])}
        grads = {"w": np.array([0.5, -2.0])}
        new, state = nk.adam_step(params, grads, AdamState(lr=0.1))
        # bias-corrected first step is lr * sign(g)
        np.testing.assert_allclose(new["w"], [0.9, -0.9], atol=1e-6)
        assert state.t == 1
        np.testing.assert_array_equal(params["w"], [1.0, -1.0])

    def test_zero_lr_is_identity(self, rng64):
        params = {"w": rng64.standard_normal(4)}
        new, _ = nk.adam_step(params, {"w": rng64.standard_normal(4)},
                              AdamState(lr=0.0, weight_decay=1e-2))
        np.testing.assert_array_equal(new["w"], params["w"])

    def test_unknown_gradient(self):
        with pytest.raises(ShapeMismatch):
            nk.adam_step({"w": np.zeros(2)}, {"v": np.zeros(2)}, AdamState())

    def test_minimises_quadratic(self):
        params = {"w": np.array([3.0])}
        state = AdamState(lr=0.1)
        for _ in range(300):
            params, state = nk.adam_step(params, {"w": 2 * params["w"]}, state)
        assert abs(params["w"][0]) < 0.25

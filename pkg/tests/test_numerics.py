import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fewshot_tc import numerics as nx
from fewshot_tc.errors import ConfigError, ContractViolation, NumericError

from oracles import UNARY_STEPS, RandomGraph, central_fd, rel_err


def T(x, grad=False):
    return nx.Tensor(np.asarray(x, dtype=float), requires_grad=grad)


class TestForward:
    def test_matmul(self):
        out = nx.matmul(T([[1, 2], [3, 4]]), T([[1], [1]]))
        np.testing.assert_array_equal(out.data, [[3], [7]])

    def test_softmax_uniform(self):
        np.testing.assert_allclose(nx.softmax(T([0, 0, 0])).data, [1 / 3] * 3)

    def test_l2_normalize(self):
        np.testing.assert_allclose(nx.l2_normalize(T([3, 4])).data, [0.6, 0.8])

    def test_l2_normalize_zero_vector(self):
        np.testing.assert_array_equal(nx.l2_normalize(T([0.0, 0.0])).data, [0, 0])

    def test_shape_mismatch_is_contract_violation(self):
        with pytest.raises(ContractViolation):
            nx.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))
        with pytest.raises(ContractViolation):
            T(np.ones((2, 3))) + T(np.ones((4,)))

    def test_non_finite_names_op(self):
        with pytest.raises(NumericError, match="log"):
            nx.log(T([-1.0]))

    def test_conv2d_matches_direct_loop(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 3, 5, 4))
        w = rng.normal(size=(4, 3, 3, 2))
        b = rng.normal(size=4)
        pads = nx.same_padding(3, 2)
        out = nx.conv2d(T(x), T(w), T(b), padding=pads).data
        xp = np.pad(x, ((0, 0), (0, 0)) + pads)
        ref = np.zeros((2, 4, 5, 4))
        for n in range(2):
            for o in range(4):
                for i in range(5):
                    for j in range(4):
                        ref[n, o, i, j] = (xp[n, :, i:i + 3, j:j + 2] * w[o]).sum() + b[o]
        np.testing.assert_allclose(out, ref, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(2, 7), st.integers(0, 10_000))
    def test_softmax_rows_sum_to_one(self, n, c, seed):
        x = np.random.default_rng(seed).normal(scale=10, size=(n, c))
        np.testing.assert_allclose(nx.softmax(T(x), axis=1).data.sum(axis=1), 1.0, atol=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(2, 7), st.integers(0, 10_000))
    def test_cross_entropy_non_negative(self, n, c, seed):
        rng = np.random.default_rng(seed)
        logits = rng.normal(scale=5, size=(n, c))
        labels = rng.integers(0, c, size=n)
        assert nx.cross_entropy(T(logits), labels).item() >= 0.0

    def test_batch_norm_training_statistics(self):
        rng = np.random.default_rng(3)
        x = rng.normal(loc=4.0, scale=3.0, size=(16, 5, 6, 3))
        rm, rv = np.zeros(5), np.ones(5)
        y = nx.batch_norm(T(x), T(np.ones(5)), T(np.zeros(5)), rm, rv, training=True).data
        mu = y.mean(axis=(0, 2, 3))
        var = y.var(axis=(0, 2, 3))
        assert np.abs(mu).max() < 1e-6
        assert np.abs(var - 1).max() < 1e-4
        # running stats moved toward the batch statistics with momentum 0.1
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))

    def test_batch_norm_eval_uses_running_stats(self):
        x = T(np.full((4, 2), 3.0))
        y = nx.batch_norm(x, T([1.0, 1.0]), T([0.0, 0.0]), np.array([1.0, 1.0]),
                          np.array([4.0, 4.0]), training=False, eps=0.0)
        np.testing.assert_allclose(y.data, 1.0)

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(11)
            g = RandomGraph(rng, 4)
            leaves = [nx.Tensor(v, requires_grad=True) for v in g.values]
            loss = g.build(leaves)
            return loss.data.tobytes(), [v.data.tobytes() for v in nx.backward(loss).values()]

        assert run() == run()


class TestBackward:
    def test_square(self):
        w = T(3.0, grad=True)
        assert nx.backward(w * w)[w].item() == 6.0

    def test_relu_gate(self):
        w = T([-1.0, 2.0], grad=True)
        g = nx.backward(nx.sum_(nx.relu(w)))[w]
        np.testing.assert_array_equal(g.data, [0.0, 1.0])

    def test_non_scalar_loss_rejected(self):
        w = T([1.0, 2.0], grad=True)
        with pytest.raises(ContractViolation):
            nx.backward(w * 2.0)

    def test_tape_replayable(self):
        w = T([1.0, -2.0], grad=True)
        loss = nx.sum_(w * w * w)
        g1 = nx.backward(loss)[w].data
        g2 = nx.backward(loss)[w].data
        np.testing.assert_array_equal(g1, g2)

    def test_three_layer_net_matches_fd(self):
        rng = np.random.default_rng(5)
        vals = [rng.normal(size=(6, 4)), rng.normal(size=(4, 5)), rng.normal(size=(5, 5)),
                rng.normal(size=(5, 3))]
        labels = rng.integers(0, 3, size=6)

        def build(x, w1, w2, w3):
            h = nx.relu(nx.matmul(x, w1))
            h = nx.relu(nx.matmul(h, w2))
            return nx.cross_entropy(nx.matmul(h, w3), labels)

        leaves = [T(v, grad=True) for v in vals]
        gmap = nx.backward(build(*leaves))

        def f(*arrs):
            with nx.no_grad():
                return build(*[T(a) for a in arrs]).item()

        fd = central_fd(f, [v.copy() for v in vals])
        for leaf, ref in zip(leaves, fd):
            assert rel_err(gmap[leaf].data, ref) < 1e-4

    @pytest.mark.parametrize("seed", range(40))
    def test_random_graph(self, seed):
        rng = np.random.default_rng(1000 + seed)
        g = RandomGraph(rng, int(rng.integers(1, 5)),
                        force=UNARY_STEPS[seed % len(UNARY_STEPS)])
        assert g.check() < 1e-4


class TestHigherOrder:
    @staticmethod
    def adapt_then_eval(w, inner_lr, xs=1.0, ys=1.0, xq=1.0, yq=1.0):
        inner = (w * xs - ys) ** 2
        (g,) = nx.grad(inner, [w], create_graph=True)
        w_adapted = w - g * inner_lr
        return (w_adapted * xq - yq) ** 2

    def test_closed_form_scalar(self):
        w = T(0.0, grad=True)
        loss_holder = {}

        def builder(params):
            loss_holder["loss"] = self.adapt_then_eval(params[0], 0.5)
            return loss_holder["loss"]

        (g,) = nx.higher_order_grad(builder, [w])
        assert loss_holder["loss"].item() == 0.0
        assert g.item() == 0.0

    def test_zero_inner_lr_is_plain_backward(self):
        w = T(0.3, grad=True)
        (g,) = nx.higher_order_grad(lambda p: self.adapt_then_eval(p[0], 0.0, yq=2.0), [w])
        plain = nx.backward((w * 1.0 - 2.0) ** 2)[w]
        assert g.item() == pytest.approx(plain.item(), rel=1e-12)

    def test_second_order_term_closed_form(self):
        # inner grad 4(2w-1) gives dw'/dw = 1 - 0.1*8, a non-trivial second-order term
        w = T(0.2, grad=True)
        (g,) = nx.higher_order_grad(lambda p: self.adapt_then_eval(p[0], 0.1, xs=2.0), [w])
        wp = 0.2 - 0.1 * 2 * 2 * (2 * 0.2 - 1)
        assert g.item() == pytest.approx(2 * (wp - 1) * (1 - 0.8), rel=1e-12)

    def test_recording_disabled_rejected(self):
        w = T(1.0, grad=True)
        with nx.no_grad():
            with pytest.raises(ContractViolation):
                nx.higher_order_grad(lambda p: self.adapt_then_eval(p[0], 0.5), [w])

    def test_two_layer_net_matches_fd_of_pipeline(self):
        rng = np.random.default_rng(7)
        xs, xq = rng.normal(size=(5, 3)), rng.normal(size=(4, 3))
        ys, yq = rng.integers(0, 2, size=5), rng.integers(0, 2, size=4)
        vals = [rng.normal(size=(3, 4)) * 0.5, rng.normal(size=(4,)) * 0.1,
                rng.normal(size=(4, 2)) * 0.5]

        def pipeline(params, create_graph):
            w1, b1, w2 = params
            def loss(ps, x, y):
                h = nx.sigmoid(nx.matmul(x, ps[0]) + ps[1])
                return nx.cross_entropy(nx.matmul(h, ps[2]), y)
            ps = list(params)
            for _ in range(2):
                gs = nx.grad(loss(ps, xs, ys), ps, create_graph=create_graph)
                ps = [p - g * 0.3 for p, g in zip(ps, gs)]
            return loss(ps, xq, yq)

        leaves = [T(v, grad=True) for v in vals]
        got = nx.higher_order_grad(lambda p: pipeline(p, True), leaves)

        def f(*arrs):
            ps = [T(a, grad=True) for a in arrs]
            return pipeline(ps, False).item()

        fd = central_fd(f, [v.copy() for v in vals])
        for g, ref in zip(got, fd):
            assert rel_err(g.data, ref) < 1e-3


class TestOptim:
    def test_sgd_step(self):
        w = T(1.0, grad=True)
        opt = nx.Optimizer([w], kind="sgd", lr=0.1)
        opt.step([np.array(1.0)])
        assert w.item() == pytest.approx(0.9)
        assert opt.state.step_count == 1

    def test_halving_schedule(self):
        w = T(1.0, grad=True)
        opt = nx.Optimizer([w], lr=0.001, schedule=nx.LRSchedule("halve_every", 10))
        opt.set_epoch(0)
        assert opt.lr == 0.001
        opt.set_epoch(9)
        assert opt.lr == 0.001
        opt.set_epoch(10)
        assert opt.lr == 0.0005
        opt.set_epoch(20)
        assert opt.lr == 0.00025

    @staticmethod
    def _adam_on_square(steps):
        w = T(5.0, grad=True)
        opt = nx.Optimizer([w], kind="adam", lr=0.01)
        for _ in range(steps):
            opt.step([nx.backward(w * w)[w]])
        return w.item()

    @pytest.mark.xfail(strict=True, reason="standard Adam (b2=0.999) is still at |w|~1.30 "
                       "after 500 steps; the step size decays with the remembered "
                       "second moment, see test_adam_matches_reference_trajectory")
    def test_adam_converges_on_quadratic_500_steps(self):
        assert abs(self._adam_on_square(500)) < 0.1

    def test_adam_matches_reference_trajectory(self):
        # values frozen from torch.optim.Adam (float64, same hyper-parameters)
        assert self._adam_on_square(500) == pytest.approx(1.2973014950703692, rel=1e-12)
        assert self._adam_on_square(1000) == pytest.approx(0.13533010460415995, rel=1e-10)

    def test_adam_buffers_match_param_shapes(self):
        ps = [T(np.zeros((3, 2)), grad=True), T(np.zeros(4), grad=True)]
        opt = nx.Optimizer(ps)
        assert [m.shape for m in opt.state.m] == [(3, 2), (4,)]

    @pytest.mark.parametrize("lr", [0.0, -1e-3])
    def test_non_positive_lr_rejected(self, lr):
        with pytest.raises(ConfigError):
            nx.Optimizer([T(1.0, grad=True)], lr=lr)

    def test_schedule_parse(self):
        assert nx.LRSchedule.parse("halve_every:10") == nx.LRSchedule("halve_every", 10)
        assert nx.LRSchedule.parse(None).kind == "constant"
        with pytest.raises(ConfigError):
            nx.LRSchedule.parse("cosine")

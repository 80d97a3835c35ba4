import math

import numpy as np
import pytest

from fgsmlab import autodiff as ad
from helpers import autodiff_vs_fd, central_diff, conv_graph, random_graph, rel_err


def test_sum_grad_is_ones():
    x = ad.Tensor(np.zeros((2, 2)), requires_grad=True)
    (g,) = ad.grad(ad.sum(x), [x])
    assert np.array_equal(g.data, np.ones((2, 2)))


def test_square_grad():
    x = ad.Tensor(np.array([3.0]), requires_grad=True)
    (g,) = ad.grad(ad.sum(x * x), [x])
    assert g.data.tolist() == [6.0]


@pytest.mark.parametrize("seed", range(20))
def test_random_graph_matches_finite_differences(seed):
    assert autodiff_vs_fd(*random_graph(seed)) < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_conv_bn_graph_matches_finite_differences(seed):
    assert autodiff_vs_fd(*conv_graph(seed)) < 1e-4


def test_second_order_input_grad_norm():
    # d/dx ||d/dx L||_2 versus FD of the first-order field
    rng = np.random.default_rng(3)
    w = rng.normal(size=(3, 4))
    x0 = rng.normal(size=(1, 4))
    y = np.array([1])

    def grad_norm(xa, create):
        xt = ad.Tensor(xa, requires_grad=True)
        loss = ad.cross_entropy(ad.activation("gelu")(ad.linear(xt, ad.Tensor(w))), y)
        (g,) = ad.grad(loss, [xt], create_graph=create)
        return xt, ad.l2_norm(g)

    xt, n = grad_norm(x0, True)
    (gg,) = ad.grad(n, [xt])
    fd = central_diff(lambda v: grad_norm(v, False)[1].item(), x0)
    assert rel_err(gg.data, fd) < 1e-3


def test_create_graph_false_returns_constants():
    x = ad.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (g,) = ad.grad(ad.sum(ad.exp(x)), [x])
    assert not g.requires_grad


def test_non_scalar_output_rejected():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        ad.grad(x * 2.0, [x])


def test_unused_input():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    z = ad.Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ValueError):
        ad.grad(ad.sum(x), [z])
    (g,) = ad.grad(ad.sum(x), [z], allow_unused=True)
    assert np.array_equal(g.data, np.zeros(2))


def test_nan_in_backward_raises():
    x = ad.Tensor(np.array([0.0]), requires_grad=True)
    with np.errstate(all="ignore"):
        y = ad.sum(ad.sqrt(x))
        with pytest.raises(ad.NonFiniteError):
            ad.grad(y, [x])


def test_input_that_is_ancestor_of_another_input():
    x = ad.Tensor(np.array([2.0]), requires_grad=True)
    h = x * x
    gx, gh = ad.grad(ad.sum(h * 3.0), [x, h])
    assert gx.data.tolist() == [12.0]
    assert gh.data.tolist() == [3.0]


def test_batch_gradient_is_sum_of_per_example():
    rng = np.random.default_rng(0)
    w = ad.Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    x = rng.normal(size=(4, 5))
    y = rng.integers(0, 3, size=4)
    (full,) = ad.grad(ad.cross_entropy(ad.linear(ad.Tensor(x), w), y, reduction="sum"), [w])
    parts = sum(ad.grad(ad.cross_entropy(ad.linear(ad.Tensor(x[i : i + 1]), w), y[i : i + 1], "sum"), [w])[0].data
                for i in range(4))
    np.testing.assert_allclose(full.data, parts, rtol=1e-12, atol=1e-14)


def test_no_grad_records_nothing():
    x = ad.Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_op_counter_tracks_backward_recording():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.op_counter() as c:
        ad.grad(ad.sum(ad.exp(x)), [x])
    assert c.recorded_in_backward == 0
    with ad.op_counter() as c:
        ad.grad(ad.sum(ad.exp(x)), [x], create_graph=True)
    assert c.recorded_in_backward > 0


class TestConv2d:
    # x[c,i,j] = ((7c + 3i + j) % 5 - 2) / 4 ; w[o,c,a,b] = ((o + 2c + 3a + b) % 4 - 1.5) / 2
    x = np.array([[[((c * 7 + i * 3 + j) % 5 - 2) / 4 for j in range(4)] for i in range(4)] for c in range(2)])[None]
    w = np.array([[[[((o + 2 * c + 3 * a + b) % 4 - 1.5) / 2 for b in range(3)] for a in range(3)]
                   for c in range(2)] for o in range(2)])

    def test_ones(self):
        out = ad.conv2d(ad.Tensor(np.ones((1, 1, 3, 3))), ad.Tensor(np.ones((1, 1, 3, 3))))
        assert out.data.reshape(-1).tolist() == [9.0]

    def test_ones_stride2_pad1(self):
        out = ad.conv2d(ad.Tensor(np.ones((1, 1, 3, 3))), ad.Tensor(np.ones((1, 1, 3, 3))), stride=2, padding=1)
        assert out.data.tolist() == [[[[4.0, 4.0], [4.0, 4.0]]]]

    def test_nested_loop_oracle_stride1(self):
        out = ad.conv2d(ad.Tensor(self.x), ad.Tensor(self.w)).data
        expected = [[[-0.4375, 1.625], [-1.125, -1.5625]], [[-1.5625, -1.125], [1.625, -0.4375]]]
        np.testing.assert_allclose(out[0], expected, rtol=0, atol=1e-12)

    def test_nested_loop_oracle_stride2_pad1(self):
        out = ad.conv2d(ad.Tensor(self.x), ad.Tensor(self.w), stride=2, padding=1).data
        expected = [[[0.5, -0.375], [1.3125, -1.5625]], [[-0.75, 2.125], [0.4375, -0.4375]]]
        np.testing.assert_allclose(out[0], expected, rtol=0, atol=1e-12)

    def test_linearity(self):
        rng = np.random.default_rng(1)
        x, d = rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(2, 3, 6, 6))
        w = ad.Tensor(rng.normal(size=(4, 3, 3, 3)))
        lhs = ad.conv2d(ad.Tensor(x + d), w).data - ad.conv2d(ad.Tensor(x), w).data
        np.testing.assert_allclose(lhs, ad.conv2d(ad.Tensor(d), w).data, rtol=0, atol=1e-12)

    def test_bias(self):
        out = ad.conv2d(ad.Tensor(np.zeros((1, 1, 3, 3))), ad.Tensor(np.ones((2, 1, 3, 3))), ad.Tensor([1.0, -2.0]))
        assert out.data.reshape(-1).tolist() == [1.0, -2.0]

    @pytest.mark.parametrize("xs, ws", [((1, 2, 3, 3), (1, 3, 3, 3)), ((1, 1, 2, 2), (1, 1, 3, 3)), ((2, 3), (1, 1, 1, 1))])
    def test_shape_errors(self, xs, ws):
        with pytest.raises(ValueError):
            ad.conv2d(ad.Tensor(np.ones(xs)), ad.Tensor(np.ones(ws)))


class TestSoftplus:
    def test_zero_alpha1(self):
        assert ad.softplus_param(ad.Tensor([0.0]), 1.0).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_zero_alpha2(self):
        assert ad.softplus_param(ad.Tensor([0.0]), 2.0).item() == pytest.approx(math.log(2) / 2, abs=1e-12)

    def test_large_input_no_overflow(self):
        with np.errstate(over="raise"):
            v = ad.softplus_param(ad.Tensor([100.0]), 2.0).item()
        assert abs(v - 100.0) < 1e-9

    @pytest.mark.parametrize("alpha", [0.0, -1.0])
    def test_bad_alpha(self, alpha):
        with pytest.raises(ValueError):
            ad.softplus_param(ad.Tensor([1.0]), alpha)

    def test_grad_is_sigmoid(self):
        x = ad.Tensor(np.array([-3.0, 0.0, 0.5, 40.0]), requires_grad=True)
        (g,) = ad.grad(ad.sum(ad.softplus_param(x, 2.0)), [x])
        np.testing.assert_allclose(g.data, 1 / (1 + np.exp(-2 * x.data)), rtol=1e-12)


class TestCrossEntropy:
    def test_uniform(self):
        assert ad.cross_entropy(ad.Tensor([[0.0, 0.0]]), np.array([0])).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_saturated(self):
        v = ad.cross_entropy(ad.Tensor([[1000.0, 0.0]]), np.array([0])).item()
        assert math.isfinite(v) and v == pytest.approx(0.0, abs=1e-12)

    def test_direct_oracle(self):
        logits = np.array([[0.5, -1.25, 2.0, 0.0], [3.0, 3.0, -2.0, 1.5], [-0.75, 0.25, 0.125, -3.0]])
        y = np.array([2, 0, 3])
        per = ad.cross_entropy(ad.Tensor(logits), y, reduction="none").data
        np.testing.assert_allclose(per, [0.3344986126036624, 0.801942438946007, 4.0781808105802835], rtol=1e-10)
        assert ad.cross_entropy(ad.Tensor(logits), y).item() == pytest.approx(1.7382072873766508, rel=1e-10)

    @pytest.mark.parametrize("label", [-1, 4])
    def test_label_out_of_range(self, label):
        with pytest.raises(ValueError):
            ad.cross_entropy(ad.Tensor(np.zeros((1, 4))), np.array([label]))


class TestL2Norm:
    def test_pythagorean(self):
        assert ad.l2_norm(ad.Tensor([3.0, 4.0])).item() == 5.0

    def test_zero_subgradient(self):
        x = ad.Tensor(np.zeros(3), requires_grad=True)
        n = ad.l2_norm(x)
        (g,) = ad.grad(n, [x])
        assert n.item() == 0.0 and np.array_equal(g.data, np.zeros(3))

    def test_direct_oracle(self):
        v = np.array([[0.3, -1.2, 2.5], [0.0, 4.0, -0.5]])
        np.testing.assert_allclose(ad.l2_norm(ad.Tensor(v), axis=1).data, [2.7892651361962706, 4.031128874149275],
                                   rtol=1e-12)
        assert ad.l2_norm(ad.Tensor(v)).item() == pytest.approx(4.902040391510457, rel=1e-12)


def test_sign_values_and_detached():
    x = ad.Tensor(np.array([-2.0, 0.0, 0.1]), requires_grad=True)
    s = ad.sign(x)
    assert s.data.tolist() == [-1.0, 0.0, 1.0]
    assert not s.requires_grad


def test_cosine_similarity_zero_rows_flagged():
    a = ad.Tensor(np.array([[1.0, 0.0], [0.0, 0.0]]))
    b = ad.Tensor(np.array([[2.0, 0.0], [1.0, 1.0]]))
    cos, valid = ad.cosine_similarity(a, b)
    assert cos.data.tolist() == [1.0, 0.0]
    assert valid.tolist() == [True, False]


def test_batch_norm_eval_uses_running_stats():
    x = np.arange(8, dtype=np.float64).reshape(2, 1, 2, 2)
    rm, rv = np.array([1.0]), np.array([4.0])
    out = ad.batch_norm(ad.Tensor(x), ad.Tensor([1.0]), ad.Tensor([0.0]), rm, rv, train=False, eps=0.0)
    np.testing.assert_allclose(out.data, (x - 1.0) / 2.0)


def test_batch_norm_train_updates_only_when_asked():
    x = np.arange(8, dtype=np.float64).reshape(2, 1, 2, 2)
    rm, rv = np.zeros(1), np.ones(1)
    ad.batch_norm(ad.Tensor(x), ad.Tensor([1.0]), ad.Tensor([0.0]), rm, rv, train=True)
    assert rm.tolist() == [0.0]
    ad.batch_norm(ad.Tensor(x), ad.Tensor([1.0]), ad.Tensor([0.0]), rm, rv, train=True, update_stats=True)
    assert rm[0] == pytest.approx(0.1 * 3.5)
    assert rv[0] == pytest.approx(0.9 + 0.1 * np.var(x, ddof=1))

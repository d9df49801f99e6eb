import numpy as np
import pytest

import stemvit.tensor as T
from stemvit.tensor import Tensor, Tape, ShapeError, backward, finite_diff_grad


def grad_of(fn, x0, *args):
    """Autodiff gradient of scalar fn(Tensor) at numpy point x0."""
    x = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        loss = fn(x, *args)
        backward(tape, loss)
    return x.grad


def rel_err(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return np.abs(a - b).max() / denom


class TestMatmul:
    def test_identity(self):
        m = np.arange(9.0).reshape(3, 3)
        out = Tensor(np.eye(3)) @ Tensor(m)
        np.testing.assert_array_equal(out.data, m)

    def test_hand_product(self):
        out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[0.0], [1.0]])
        np.testing.assert_array_equal(out.data, [[2.0], [4.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError, match="5, 7"):
            Tensor(np.ones((5, 7))) @ Tensor(np.ones((3, 2)))

    def test_gradient_vs_finite_diff(self):
        rng = np.random.default_rng(0)
        a0 = rng.standard_normal((5, 7))
        b = Tensor(rng.standard_normal((7, 3)))
        g = grad_of(lambda x: (x @ b).sum(), a0)
        fd = finite_diff_grad(lambda x: float((x @ b.data).sum()), a0.copy())
        assert rel_err(g, fd) < 1e-6

    def test_batched_gradient(self):
        rng = np.random.default_rng(1)
        a0 = rng.standard_normal((2, 4, 3))
        b = Tensor(rng.standard_normal((3, 5)))
        g = grad_of(lambda x: (x @ b).sum(), a0)
        fd = finite_diff_grad(lambda x: float((x @ b.data).sum()), a0.copy())
        assert rel_err(g, fd) < 1e-6


class TestElementwise:
    def test_add_zeros(self):
        x = np.arange(6.0).reshape(2, 3)
        out = Tensor(x) + Tensor(np.zeros((2, 3)))
        np.testing.assert_array_equal(out.data, x)

    def test_mul(self):
        out = Tensor([1.0, 2.0, 3.0]) * Tensor([2.0, 2.0, 2.0])
        np.testing.assert_array_equal(out.data, [2.0, 4.0, 6.0])

    def test_broadcast_error(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((4, 5)))

    def test_log_negative(self):
        with pytest.raises(ValueError):
            T.log(Tensor([-1.0, 2.0]))

    def test_sqrt_negative(self):
        with pytest.raises(ValueError):
            T.sqrt(Tensor([-4.0]))

    @pytest.mark.parametrize("seed", range(20))
    def test_exp_gradient(self, seed):
        rng = np.random.default_rng(seed)
        x0 = rng.uniform(-1, 1, (4, 4))
        g = grad_of(lambda x: T.exp(x).sum(), x0)
        fd = finite_diff_grad(lambda x: float(np.exp(x).sum()), x0.copy())
        assert rel_err(g, fd) < 1e-6

    def test_broadcast_gradients(self):
        rng = np.random.default_rng(2)
        a0 = rng.standard_normal((3, 1, 4))
        b = Tensor(rng.standard_normal((5, 4)))
        g = grad_of(lambda x: (x * b).sum(), a0)
        fd = finite_diff_grad(lambda x: float((x * b.data).sum()), a0.copy())
        assert rel_err(g, fd) < 1e-6


class TestReduce:
    def test_sum_all(self):
        assert Tensor([[1.0, 2.0], [3.0, 4.0]]).sum().item() == 10.0

    def test_mean_of_constant(self):
        assert Tensor(np.full((3, 5), 2.5)).mean().item() == 2.5

    def test_axis_out_of_range(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 2))).sum(axis=5)

    def test_mean_gradient(self):
        rng = np.random.default_rng(3)
        x0 = rng.standard_normal((4, 6))
        g = grad_of(lambda x: x.mean(axis=1).sum(), x0)
        fd = finite_diff_grad(lambda x: float(x.mean(axis=1).sum()), x0.copy())
        assert rel_err(g, fd) < 1e-6

    def test_max_gradient(self):
        rng = np.random.default_rng(4)
        x0 = rng.standard_normal((5, 5))
        g = grad_of(lambda x: x.max(axis=0).sum(), x0)
        fd = finite_diff_grad(lambda x: float(x.max(axis=0).sum()), x0.copy())
        assert rel_err(g, fd) < 1e-6


class TestBackwardDriver:
    def test_sum_gives_ones(self):
        w = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        with Tape() as tape:
            backward(tape, w.sum())
        np.testing.assert_array_equal(w.grad, np.ones(3))

    def test_half_square_gives_identity(self):
        w0 = np.array([0.5, -1.5, 2.0])
        w = Tensor(w0.copy(), requires_grad=True)
        with Tape() as tape:
            loss = (w * w).sum() * Tensor(0.5)
            backward(tape, loss)
        np.testing.assert_allclose(w.grad, w0)

    def test_non_scalar_loss_rejected(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            out = w * Tensor(2.0)
            with pytest.raises(ValueError, match="scalar"):
                backward(tape, out)

    def test_unreached_grads_untouched(self):
        w = Tensor(np.ones(3), requires_grad=True)
        u = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            backward(tape, w.sum())
        assert u.grad is None

    def test_reused_tensor_accumulates(self):
        w0 = np.array([2.0, 3.0])
        w = Tensor(w0.copy(), requires_grad=True)
        with Tape() as tape:
            loss = (w * w).sum() + w.sum()  # d/dw = 2w + 1
            backward(tape, loss)
        np.testing.assert_allclose(w.grad, 2 * w0 + 1)


class TestFiniteDiff:
    def test_sum_gives_ones(self):
        fd = finite_diff_grad(lambda x: float(x.sum()), np.array([1.0, -2.0, 0.5]))
        np.testing.assert_allclose(fd, np.ones(3))

    def test_square_at_three(self):
        fd = finite_diff_grad(lambda x: float(x[0] ** 2), np.array([3.0]), eps=1e-4)
        assert abs(fd[0] - 6.0) < 1e-6

    def test_bad_eps(self):
        with pytest.raises(ValueError):
            finite_diff_grad(lambda x: 0.0, np.ones(2), eps=0.0)

    def test_matches_backward_on_mlp(self):
        rng = np.random.default_rng(5)
        w1 = Tensor(rng.standard_normal((6, 8)) * 0.3)
        w2 = Tensor(rng.standard_normal((8, 1)) * 0.3)
        x0 = rng.standard_normal((4, 6))

        def net(x):
            h = T.maximum(x @ w1, Tensor(0.0))
            return (h @ w2).sum()

        g = grad_of(net, x0)
        fd = finite_diff_grad(lambda x: float(
            (np.maximum(x @ w1.data, 0.0) @ w2.data).sum()), x0.copy())
        assert rel_err(g, fd) < 1e-4


class TestInvariants:
    def test_positive_extents(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((0, 3)))

    def test_determinism_same_seed(self):
        def roll():
            rng = np.random.default_rng(7)
            x = Tensor(rng.standard_normal((3, 3)))
            return (T.exp(x) @ x).data

        np.testing.assert_array_equal(roll(), roll())

    @pytest.mark.parametrize("shapes", [((2, 3), (3,)), ((4, 1, 2), (3, 2)), ((4, 4, 4), (4, 4))])
    def test_broadcast_sum_matches_naive(self, shapes):
        rng = np.random.default_rng(8)
        a = rng.standard_normal(shapes[0])
        b = rng.standard_normal(shapes[1])
        got = (Tensor(a) + Tensor(b)).sum().item()
        grid = np.broadcast_shapes(a.shape, b.shape)
        naive = sum(
            np.broadcast_to(a, grid).reshape(-1)[i] + np.broadcast_to(b, grid).reshape(-1)[i]
            for i in range(int(np.prod(grid)))
        )
        assert abs(got - naive) < 1e-9

    def test_slices_copy(self):
        x = Tensor(np.arange(4.0))
        y = x[1:3]
        y.data[0] = 99.0
        assert x.data[1] == 1.0

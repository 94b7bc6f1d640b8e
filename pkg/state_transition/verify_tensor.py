import numpy as np
import pytest

from state_transition import tensor as T
from state_transition.errors import DimensionError, UsageError
from state_transition.gradcheck import central_difference_gradient, relative_error
from state_transition.tensor import ComputationTape, Tensor


def gradient_of(loss_fn, *leaves: Tensor) -> None:
    "Run loss_fn under a fresh tape and backpropagate into leaves"
    for leaf in leaves:
        leaf.zero_grad()
    with ComputationTape() as tape:
        loss = loss_fn()
    T.backward(loss, tape)


def check_gradient(loss_fn, leaf: Tensor, step: float = 1e-5) -> float:
    gradient_of(loss_fn, leaf)
    numeric = central_difference_gradient(lambda: loss_fn().item(), leaf.data, step)
    return relative_error(leaf.grad, numeric)


class VerifyMatmul:
    def verify_identity(self) -> None:
        b = Tensor([[1, 2], [3, 4]])
        assert np.array_equal(T.matmul(Tensor(np.eye(2)), b).data, b.data)

    def verify_hand_computed(self) -> None:
        out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5], [6]]))
        assert np.array_equal(out.data, [[17], [39]])

    def verify_shape_mismatch_names_both_shapes(self) -> None:
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))

    def verify_gradient(self) -> None:
        rng = np.random.default_rng(0)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)))
        assert check_gradient(lambda: T.sum_all(T.matmul(a, b)), a) < 1e-6


class VerifySoftmax:
    def verify_symmetric_row(self) -> None:
        assert np.allclose(T.softmax_rows(Tensor([[1.0, 1.0]])).data, [[0.5, 0.5]], atol=1e-15)

    def verify_analytic_row(self) -> None:
        out = T.softmax_rows(Tensor([[0.0, np.log(3.0)]]))
        assert np.allclose(out.data, [[0.25, 0.75]], atol=1e-15)

    def verify_large_values_do_not_overflow(self) -> None:
        out = T.softmax_rows(Tensor([[1000.0, 1000.0]]))
        assert np.array_equal(out.data, [[0.5, 0.5]])

    def verify_rows_are_distributions(self) -> None:
        rng = np.random.default_rng(1)
        out = T.softmax_rows(Tensor(rng.uniform(-500, 500, size=(20, 7))))
        assert np.all(np.isfinite(out.data))
        assert np.max(np.abs(out.data.sum(axis=-1) - 1.0)) < 1e-9
        assert np.all(out.data <= 1.0)
        assert np.all(out.data >= 0.0)

    def verify_masked_entries_get_zero(self) -> None:
        mask = np.array([[True, False, True]])
        out = T.softmax_rows(Tensor([[0.0, 50.0, 0.0]]), mask)
        assert np.array_equal(out.data, [[0.5, 0.0, 0.5]])

    def verify_empty_rows_rejected(self) -> None:
        with pytest.raises(DimensionError):
            T.softmax_rows(Tensor(np.zeros((2, 0))))

    def verify_gradient(self) -> None:
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        weights = Tensor(rng.normal(size=(3, 5)))
        assert check_gradient(lambda: T.sum_all(T.mul(T.softmax_rows(x), weights)), x) < 1e-6

    def verify_counts_widths(self) -> None:
        with T.counting() as counters:
            T.softmax_rows(Tensor(np.zeros((4, 6))))
        assert counters.softmax_widths == {6: 4}


class VerifyRMSNorm:
    def verify_unit_rms_input(self) -> None:
        out = T.rmsnorm(Tensor([1.0, 1.0, 1.0, 1.0]), Tensor(np.ones(4)))
        assert np.allclose(out.data, 1.0, atol=1e-6)

    def verify_scale_normalization(self) -> None:
        out = T.rmsnorm(Tensor([2.0, 2.0]), Tensor(np.ones(2)))
        assert np.allclose(out.data, 1.0, atol=1e-6)

    def verify_gain_mismatch(self) -> None:
        with pytest.raises(DimensionError):
            T.rmsnorm(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))

    def verify_gradients(self) -> None:
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        gain = Tensor(rng.normal(size=6), requires_grad=True)
        weights = Tensor(rng.normal(size=(4, 6)))

        def loss() -> Tensor:
            return T.sum_all(T.mul(T.rmsnorm(x, gain), weights))

        assert check_gradient(loss, x) < 1e-5
        assert check_gradient(loss, gain) < 1e-5


class VerifyGelu:
    def verify_fixed_point_at_zero(self) -> None:
        assert T.gelu(Tensor([0.0])).data[0] == 0.0

    def verify_asymptote(self) -> None:
        assert abs(T.gelu(Tensor([10.0])).data[0] - 10.0) < 1e-4

    def verify_gradient(self) -> None:
        x = Tensor(np.random.default_rng(4).normal(size=10), requires_grad=True)
        assert check_gradient(lambda: T.sum_all(T.gelu(x)), x) < 1e-5


class VerifyConv2d:
    def verify_delta_kernel_is_identity(self) -> None:
        image = np.random.default_rng(5).normal(size=(1, 5, 6))
        kernel = np.zeros((1, 1, 3, 3))
        kernel[0, 0, 1, 1] = 1.0
        out = T.conv2d(Tensor(image), Tensor(kernel), stride=1)
        assert np.array_equal(out.data, image)

    def verify_ones_kernel_counts_receptive_field(self) -> None:
        out = T.conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), stride=1).data[0]
        assert out[1, 1] == 9 and out[2, 2] == 9
        assert out[0, 0] == 4 and out[3, 3] == 4 and out[0, 3] == 4
        assert out[0, 1] == 6

    @pytest.mark.parametrize("height, width", [(16, 16), (5, 7), (3, 3)])
    def verify_stride_two_output_shape(self, height: int, width: int) -> None:
        out = T.conv2d(Tensor(np.ones((2, height, width))), Tensor(np.ones((3, 2, 3, 3))), stride=2)
        assert out.shape == (3, -(-height // 2), -(-width // 2))

    def verify_channel_mismatch(self) -> None:
        with pytest.raises(DimensionError, match="channels"):
            T.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))), stride=1)

    def verify_too_small_input(self) -> None:
        with pytest.raises(DimensionError):
            T.conv2d(Tensor(np.ones((1, 2, 4))), Tensor(np.ones((1, 1, 3, 3))), stride=1)

    @pytest.mark.parametrize("stride", [1, 2])
    def verify_gradients(self, stride: int) -> None:
        rng = np.random.default_rng(6)
        image = Tensor(rng.normal(size=(2, 2, 5, 6)), requires_grad=True)
        kernels = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        weights = Tensor(rng.normal(size=T.conv2d(image, kernels, stride).shape))

        def loss() -> Tensor:
            return T.sum_all(T.mul(T.conv2d(image, kernels, stride), weights))

        assert check_gradient(loss, kernels) < 1e-4
        assert check_gradient(loss, image) < 1e-4

    def verify_mac_count(self) -> None:
        with T.counting() as counters:
            T.conv2d(Tensor(np.ones((2, 8, 8))), Tensor(np.ones((4, 2, 3, 3))), stride=2)
        assert counters.macs == 4 * 4 * 4 * 2 * 9


class VerifyBackward:
    def verify_sum_gives_ones(self) -> None:
        x = Tensor(np.random.default_rng(7).normal(size=(2, 3, 4)), requires_grad=True)
        gradient_of(lambda: T.sum_all(x), x)
        assert np.array_equal(x.grad, np.ones((2, 3, 4)))

    def verify_half_square_gives_identity(self) -> None:
        x = Tensor(np.random.default_rng(8).normal(size=5), requires_grad=True)
        gradient_of(lambda: T.sum_all(T.mul(x, x)) * 0.5, x)
        assert np.allclose(x.grad, x.data, atol=1e-15)

    def verify_repeated_calls_accumulate(self) -> None:
        x = Tensor([1.0, 2.0], requires_grad=True)
        with ComputationTape() as tape:
            loss = T.sum_all(x)
        T.backward(loss, tape)
        T.backward(loss, tape)
        assert np.array_equal(x.grad, [2.0, 2.0])

    def verify_loss_must_be_on_tape(self) -> None:
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = T.sum_all(x)
        with ComputationTape() as tape:
            T.sum_all(x)
        with pytest.raises(UsageError, match="not produced"):
            T.backward(loss, tape)

    def verify_loss_must_be_scalar(self) -> None:
        x = Tensor([1.0, 2.0], requires_grad=True)
        with ComputationTape() as tape:
            out = T.scale(x, 2.0)
        with pytest.raises(UsageError, match="scalar"):
            T.backward(out, tape)

    def verify_nothing_recorded_without_tape(self) -> None:
        x = Tensor([1.0], requires_grad=True)
        assert T.sum_all(x).node is None

    def verify_shared_subexpression(self) -> None:
        x = Tensor([3.0], requires_grad=True)

        def loss() -> Tensor:
            y = T.scale(x, 2.0)
            return T.sum_all(T.mul(y, y))

        gradient_of(loss, x)
        assert np.allclose(x.grad, [24.0])

    @pytest.mark.parametrize("subscripts, shape_a, shape_b", [
        ("ij,jk->ik", (2, 3), (3, 4)),
        ("btid,btjd->btij", (2, 3, 2, 4), (2, 3, 5, 4)),
        ("tjil,tjlr->tir", (3, 2, 2, 4), (3, 2, 4, 4)),
    ])
    def verify_einsum_gradients(self, subscripts: str, shape_a, shape_b) -> None:
        rng = np.random.default_rng(9)
        a = Tensor(rng.normal(size=shape_a), requires_grad=True)
        b = Tensor(rng.normal(size=shape_b), requires_grad=True)
        weights = Tensor(rng.normal(size=T.einsum(subscripts, a, b).shape))

        def loss() -> Tensor:
            return T.sum_all(T.mul(T.einsum(subscripts, a, b), weights))

        assert check_gradient(loss, a) < 1e-6
        assert check_gradient(loss, b) < 1e-6

    def verify_take_with_repeats(self) -> None:
        x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
        indices = np.array([[0, 0], [2, 1]])
        gradient_of(lambda: T.sum_all(T.take(x, indices, axis=0)), x)
        assert np.array_equal(x.grad[:, 0], [2.0, 1.0, 1.0])

    def verify_concat_stack_index_gradients(self) -> None:
        rng = np.random.default_rng(10)
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        weights = Tensor(rng.normal(size=(2, 2, 6)))

        def loss() -> Tensor:
            joined = T.concat([a, b], axis=1)
            stacked = T.stack([joined, T.scale(joined, 3.0)], axis=0)
            return T.sum_all(T.mul(stacked, weights)) + T.sum_all(a[:, 1])

        assert check_gradient(loss, a) < 1e-6
        assert check_gradient(loss, b) < 1e-6


def verify_operations_are_deterministic() -> None:
    def run() -> np.ndarray:
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(1, 8, 8)))
        k = Tensor(rng.normal(size=(2, 1, 3, 3)))
        h = T.gelu(T.conv2d(x, k, 2))
        flat = T.reshape(h, (2, 16))
        return T.softmax_rows(T.rmsnorm(flat, Tensor(np.ones(16)))).data

    assert run().tobytes() == run().tobytes()

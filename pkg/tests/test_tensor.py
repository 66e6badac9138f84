"""Tensor core: forward semantics, gradient checks, tape contract, serialization."""

import io

import numpy as np
import pytest

from did.errors import ContractError, DimensionError, NumericError
from did.gradcheck import check_gradients, max_error
from did.tensor import (
    GradTape,
    Tensor,
    add,
    backward,
    concat,
    conv1d,
    dropout,
    layer_norm,
    log_softmax,
    matmul,
    mean,
    mul,
    read_tensor,
    relu,
    reshape,
    scale,
    softmax,
    std,
    transpose,
    tsum,
    write_tensor,
    zero_grads,
)

PRIM_TOL = 1e-6


def rand(shape, seed, scale_=1.0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal(shape) * scale_


class TestForwardSemantics:
    def test_matmul_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        eye = Tensor(np.eye(2))
        out = matmul(eye, a)
        assert np.max(np.abs(out.data - a.data)) <= 1e-12

    def test_matmul_hand(self):
        out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert out.data.tolist() == [[11.0]]

    def test_matmul_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))

    def test_softmax_uniform(self):
        out = softmax(Tensor([0.0, 0.0, 0.0]), axis=0)
        assert np.allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_softmax_large_inputs_no_overflow(self):
        out = softmax(Tensor([1000.0, 0.0]), axis=0)
        assert np.isfinite(out.data).all()
        assert out.data[0] > 1 - 1e-12 and out.data[1] < 1e-12

    def test_softmax_sums_to_one(self):
        x = Tensor(rand((7, 5), seed=3, scale_=10.0))
        out = softmax(x, axis=1)
        assert np.max(np.abs(out.data.sum(axis=1) - 1.0)) <= 1e-12
        assert (out.data > 0).all()

    def test_softmax_nan_rejected(self):
        with pytest.raises(NumericError):
            softmax(Tensor([np.nan, 1.0]), axis=0)

    def test_layer_norm_constant_vector(self):
        out = layer_norm(Tensor([[5.0, 5.0, 5.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        assert np.allclose(out.data, 0.0, atol=1e-12)

    def test_layer_norm_two_point(self):
        out = layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                         eps=1e-12)
        assert np.allclose(out.data, [-1.0, 1.0], atol=1e-9)

    def test_conv1d_difference_kernel(self):
        sig = Tensor([1.0, 4.0, 9.0, 16.0, 25.0])
        out = conv1d(sig, Tensor([1.0, 0.0, -1.0]), stride=1, padding=0)
        # cross-correlation: out[t] = x[t] - x[t+2]
        assert out.data.tolist() == [1.0 - 9.0, 4.0 - 16.0, 9.0 - 25.0]

    def test_std_constant_is_zero(self):
        out = std(Tensor(np.full((4,), 2.5)), axis=0)
        assert out.data == 0.0

    def test_dropout_rate_zero_is_identity(self):
        x = Tensor(rand((3, 3), seed=0))
        assert dropout(x, rate=0.0, train_mode=True) is x
        assert dropout(x, rate=0.5, train_mode=False) is x

    def test_dropout_masks_and_rescales(self):
        rng = np.random.default_rng(7)
        x = Tensor(np.ones((1000,)))
        out = dropout(x, rate=0.25, train_mode=True, rng=rng)
        kept = out.data != 0
        assert np.allclose(out.data[kept], 1 / 0.75)
        assert abs(kept.mean() - 0.75) < 0.05

    def test_concat_and_mean(self):
        a, b = Tensor([[1.0, 2.0]]), Tensor([[3.0, 4.0]])
        out = concat([a, b], axis=0)
        assert out.shape == (2, 2)
        assert np.allclose(mean(out, axis=0).data, [2.0, 3.0])

    def test_determinism_same_inputs(self):
        def run():
            x = Tensor(rand((5, 5), seed=11))
            w = Tensor(rand((5, 5), seed=12))
            return softmax(matmul(relu(x), w), axis=1).data.tobytes()

        assert run() == run()


class TestBackwardContract:
    def test_sum_grad_is_ones(self):
        x = Tensor(rand((3, 4), seed=1), requires_grad=True)
        with GradTape():
            loss = tsum(x)
        backward(loss)
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_square_grad(self):
        x = Tensor([3.0], requires_grad=True)
        with GradTape():
            loss = tsum(mul(x, x))
        backward(loss)
        assert np.allclose(x.grad, [6.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor(rand((3,), seed=2), requires_grad=True)
        with GradTape():
            y = relu(x)
        with pytest.raises(ContractError):
            backward(y)

    def test_double_backward_rejected(self):
        x = Tensor([2.0], requires_grad=True)
        with GradTape():
            loss = tsum(mul(x, x))
        backward(loss)
        with pytest.raises(ContractError):
            backward(loss)

    def test_backward_without_tape_rejected(self):
        x = Tensor([2.0], requires_grad=True)
        loss = tsum(mul(x, x))  # no active tape
        with pytest.raises(ContractError):
            backward(loss)

    def test_tape_reset_allows_reuse(self):
        x = Tensor([2.0], requires_grad=True)
        tape = GradTape()
        with tape:
            loss = tsum(mul(x, x))
        backward(loss)
        tape.reset()
        x.zero_grad()
        with tape:
            loss = tsum(mul(x, x))
        backward(loss)
        assert np.allclose(x.grad, [4.0])

    def test_grad_accumulates_across_reuse(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with GradTape():
            loss = tsum(add(mul(x, x), x))  # d/dx = 2x + 1
        backward(loss)
        assert np.allclose(x.grad, [3.0, 5.0])

    def test_replay_matches_symbolic_chain_rule(self):
        # f(A, x, b) = sum((A @ x + b)^2): symbolic grads are known exactly.
        A = Tensor(rand((3, 2), seed=5), requires_grad=True)
        x = Tensor(rand((2, 1), seed=6), requires_grad=True)
        b = Tensor(rand((3, 1), seed=7), requires_grad=True)
        with GradTape():
            y = add(matmul(A, x), b)
            loss = tsum(mul(y, y))
        backward(loss)
        r = A.data @ x.data + b.data
        assert np.allclose(A.grad, 2 * r @ x.data.T, atol=1e-12)
        assert np.allclose(x.grad, 2 * A.data.T @ r, atol=1e-12)
        assert np.allclose(b.grad, 2 * r, atol=1e-12)


class TestPrimitiveGradients:
    """Every primitive op against central finite differences (<= 1e-6)."""

    def test_matmul(self):
        a = Tensor(rand((3, 4), seed=10), requires_grad=True)
        b = Tensor(rand((4, 2), seed=11), requires_grad=True)
        errs = check_gradients(lambda: tsum(mul(matmul(a, b), matmul(a, b))),
                               {"a": a, "b": b})
        assert max_error(errs) <= PRIM_TOL

    def test_softmax(self):
        x = Tensor(rand((5,), seed=12), requires_grad=True)
        w = Tensor(rand((5,), seed=13))
        errs = check_gradients(lambda: tsum(mul(softmax(x, axis=0), w)), {"x": x})
        assert max_error(errs) <= PRIM_TOL

    def test_log_softmax(self):
        x = Tensor(rand((6,), seed=14), requires_grad=True)
        w = Tensor(rand((6,), seed=15))
        errs = check_gradients(lambda: tsum(mul(log_softmax(x, axis=0), w)), {"x": x})
        assert max_error(errs) <= PRIM_TOL

    def test_layer_norm(self):
        x = Tensor(rand((4, 6), seed=16), requires_grad=True)
        g = Tensor(rand((6,), seed=17), requires_grad=True)
        b = Tensor(rand((6,), seed=18), requires_grad=True)
        w = Tensor(rand((4, 6), seed=19))
        errs = check_gradients(lambda: tsum(mul(layer_norm(x, g, b), w)),
                               {"x": x, "gain": g, "bias": b})
        assert max_error(errs) <= 1e-5

    def test_relu(self):
        # keep inputs away from the kink so central differences are valid
        x = Tensor(rand((10,), seed=20) + np.sign(rand((10,), seed=20)) * 0.1,
                   requires_grad=True)
        errs = check_gradients(lambda: tsum(mul(relu(x), relu(x))), {"x": x})
        assert max_error(errs) <= PRIM_TOL

    def test_add_mul_scale(self):
        a = Tensor(rand((3, 4), seed=21), requires_grad=True)
        b = Tensor(rand((4,), seed=22), requires_grad=True)  # broadcast add
        errs = check_gradients(
            lambda: tsum(mul(add(a, b), scale(add(a, b), 0.7))), {"a": a, "b": b})
        assert max_error(errs) <= PRIM_TOL

    def test_mean_std(self):
        x = Tensor(rand((7, 3), seed=23), requires_grad=True)
        errs = check_gradients(
            lambda: tsum(add(mean(x, axis=0), std(x, axis=0))), {"x": x})
        assert max_error(errs) <= PRIM_TOL

    def test_transpose_reshape_concat(self):
        a = Tensor(rand((3, 4), seed=24), requires_grad=True)
        b = Tensor(rand((3, 4), seed=25), requires_grad=True)

        def loss():
            c = concat([a, b], axis=1)
            return tsum(mul(transpose(c), transpose(c)))

        errs = check_gradients(loss, {"a": a, "b": b})
        assert max_error(errs) <= PRIM_TOL
        errs = check_gradients(lambda: tsum(mul(reshape(a, (4, 3)), reshape(b, (4, 3)))),
                               {"a": a, "b": b})
        assert max_error(errs) <= PRIM_TOL

    @pytest.mark.parametrize("stride,padding", [(1, 0), (2, 0), (1, 2), (3, 1)])
    def test_conv1d(self, stride, padding):
        x = Tensor(rand((11, 3), seed=26), requires_grad=True)
        k = Tensor(rand((4, 3, 2), seed=27), requires_grad=True)
        errs = check_gradients(
            lambda: tsum(mul(conv1d(x, k, stride=stride, padding=padding),
                             conv1d(x, k, stride=stride, padding=padding))),
            {"x": x, "k": k})
        assert max_error(errs) <= PRIM_TOL

    def test_dropout_mask_treated_as_constant(self):
        x = Tensor(rand((8,), seed=28), requires_grad=True)
        rng = np.random.default_rng(99)
        mask_state = rng.bit_generator.state

        def loss():
            rng.bit_generator.state = mask_state  # same mask every probe
            return tsum(mul(dropout(x, 0.3, True, rng=rng),
                            dropout(x, 0.0, True)))

        errs = check_gradients(loss, {"x": x})
        assert max_error(errs) <= PRIM_TOL


class TestSerialization:
    def test_round_trip(self):
        t = Tensor(rand((3, 5, 2), seed=30))
        buf = io.BytesIO()
        write_tensor(buf, t)
        buf.seek(0)
        back = read_tensor(buf)
        assert back.shape == t.shape
        assert np.array_equal(back.data, t.data)

    def test_header_layout(self):
        t = Tensor(np.zeros((2, 3)))
        buf = io.BytesIO()
        write_tensor(buf, t)
        raw = buf.getvalue()
        assert raw[:4] == b"TNSR"
        assert raw[4:6] == (1).to_bytes(2, "little")      # version
        assert raw[6:8] == (2).to_bytes(2, "little")      # rank
        assert raw[8:16] == (2).to_bytes(8, "little")     # extent 0
        assert raw[16:24] == (3).to_bytes(8, "little")    # extent 1
        assert len(raw) == 24 + 6 * 8

    def test_bad_magic_rejected(self):
        with pytest.raises(ContractError):
            read_tensor(io.BytesIO(b"XXXX" + b"\x00" * 16))

"""Central finite-difference verification of autodiff gradients.

``check_gradients`` runs one taped forward/backward, then perturbs every
element of every checked tensor by +/-step and compares the numeric slope
against the recorded gradient. Errors are relative with a unit floor, so
near-zero gradients are judged on absolute error.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import GradTape, Tensor, backward, zero_grads

FD_STEP = 1e-5


def relative_error(a: np.ndarray, n: np.ndarray) -> float:
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numerical_gradient(loss_fn: Callable[[], float], t: Tensor,
                       step: float = FD_STEP) -> np.ndarray:
    """Central differences of ``loss_fn`` w.r.t. every element of ``t``.

    ``loss_fn`` must read ``t.data`` afresh on each call; the tensor is
    restored after probing.
    """
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = loss_fn()
        flat[i] = orig - step
        down = loss_fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def check_gradients(build_loss: Callable[[], Tensor],
                    tensors: Mapping[str, Tensor],
                    step: float = FD_STEP) -> dict[str, float]:
    """Max relative error per tensor between autodiff and finite differences.

    ``build_loss`` must construct the scalar loss from scratch (it is called
    once under a tape and repeatedly, untaped, for the numeric probes).
    """
    zero_grads(dict(tensors))
    with GradTape():
        loss = build_loss()
    backward(loss)
    analytic = {}
    for name, t in tensors.items():
        if t.grad is None:
            raise AssertionError(f"no gradient reached tensor {name!r}")
        analytic[name] = t.grad.copy()

    def loss_value() -> float:
        return build_loss().item()

    errors = {}
    for name, t in tensors.items():
        numeric = numerical_gradient(loss_value, t, step=step)
        errors[name] = relative_error(analytic[name], numeric)
    zero_grads(dict(tensors))
    return errors


def max_error(errors: Mapping[str, float]) -> float:
    return max(errors.values()) if errors else 0.0


def run_op_suite() -> dict[str, float]:
    """Finite-difference check of every primitive op; returns name -> error."""
    from . import tensor as T

    rng = np.random.default_rng(7)

    def t(shape, grad=True):
        return Tensor(rng.standard_normal(shape), requires_grad=grad)

    results: dict[str, float] = {}

    def check(name, build, tensors):
        results[name] = max_error(check_gradients(build, tensors))

    a, b = t((3, 4)), t((4, 2))
    check("matmul", lambda: T.tsum(T.mul(T.matmul(a, b), T.matmul(a, b))),
          {"a": a, "b": b})
    x = t((5,))
    w = Tensor(rng.standard_normal(5))
    check("softmax", lambda: T.tsum(T.mul(T.softmax(x, 0), w)), {"x": x})
    check("log_softmax", lambda: T.tsum(T.mul(T.log_softmax(x, 0), w)), {"x": x})
    ln_x, ln_g, ln_b = t((4, 6)), t((6,)), t((6,))
    ln_w = Tensor(rng.standard_normal((4, 6)))
    check("layer_norm",
          lambda: T.tsum(T.mul(T.layer_norm(ln_x, ln_g, ln_b), ln_w)),
          {"x": ln_x, "gain": ln_g, "bias": ln_b})
    r = Tensor(rng.standard_normal(10) + np.sign(rng.standard_normal(10)) * 0.2,
               requires_grad=True)
    check("relu", lambda: T.tsum(T.mul(T.relu(r), T.relu(r))), {"x": r})
    c, d = t((3, 4)), t((4,))
    check("add", lambda: T.tsum(T.mul(T.add(c, d), T.add(c, d))), {"a": c, "b": d})
    check("mul", lambda: T.tsum(T.mul(T.mul(c, c), T.mul(c, c))), {"a": c})
    check("scale", lambda: T.tsum(T.mul(T.scale(c, 1.7), T.scale(c, 1.7))), {"a": c})
    m = t((7, 3))
    check("mean", lambda: T.tsum(T.mul(T.mean(m, 0), T.mean(m, 0))), {"x": m})
    check("std", lambda: T.tsum(T.mul(T.std(m, 0), T.std(m, 0))), {"x": m})
    check("sum", lambda: T.mul(T.tsum(m), T.tsum(m)), {"x": m})
    e, f = t((3, 4)), t((3, 4))
    check("concat", lambda: T.tsum(T.mul(T.concat([e, f], 1), T.concat([e, f], 1))),
          {"a": e, "b": f})
    check("transpose", lambda: T.tsum(T.mul(T.transpose(e), T.transpose(e))),
          {"a": e})
    check("reshape", lambda: T.tsum(T.mul(T.reshape(e, (4, 3)), T.reshape(e, (4, 3)))),
          {"a": e})
    cx, ck = t((11, 3)), t((4, 3, 2))
    check("conv1d",
          lambda: T.tsum(T.mul(T.conv1d(cx, ck, 2, 1), T.conv1d(cx, ck, 2, 1))),
          {"x": cx, "k": ck})
    dx = t((8,))
    mask_rng = np.random.default_rng(3)
    mask_state = mask_rng.bit_generator.state

    def dropout_loss():
        mask_rng.bit_generator.state = mask_state
        out = T.dropout(dx, 0.3, True, rng=mask_rng)
        return T.tsum(T.mul(out, out))

    check("dropout", dropout_loss, {"x": dx})
    return results


def run_model_suite() -> dict[str, float]:
    """End-to-end gradient check of toy transformer and CNN models."""
    from . import tensor as T
    from .models import CnnConfig, CnnModel, TransformerConfig, TransformerModel

    results = {}
    tf = TransformerModel(TransformerConfig(
        num_layers=1, num_heads=2, d_model=8, d_inner=16, input_dim=6,
        fc_dims=(8, 4), num_classes=3, max_len=32), 1)
    feats = np.random.default_rng(13).standard_normal((10, 6))
    w = Tensor(np.random.default_rng(14).standard_normal(3))
    errs = check_gradients(lambda: T.tsum(T.mul(tf.forward(feats), w)),
                           tf.parameters())
    results["transformer"] = max_error(errs)

    cnn = CnnModel(CnnConfig(channels=(4, 5), kernels=(3, 3), strides=(1, 1),
                             input_dim=3, head_dims=(6,), num_classes=3), 2)
    feats = np.random.default_rng(15).standard_normal((9, 3))
    w = Tensor(np.random.default_rng(16).standard_normal(3))
    errs = check_gradients(lambda: T.tsum(T.mul(cnn.forward(feats), w)),
                           cnn.parameters())
    results["cnn"] = max_error(errs)
    return results

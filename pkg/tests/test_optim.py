"""RMSProp update rule against the scalar recurrence."""

import numpy as np
import pytest

from stereoreg.optim import NonFiniteGradient, RMSProp
from stereoreg.tensor import Tensor

from references import rmsprop_step_ref


def test_single_step_frozen_value():
    # p=1, g=2, fresh accumulator: acc = 0.1*4 = 0.4,
    # p' = 1 - 1e-3 * 2 / (sqrt(0.4) + 1e-8)
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([2.0])
    opt = RMSProp(lr=1e-3, decay=0.9, eps=1e-8)
    opt.step({"p": p})
    want = 1.0 - 1e-3 * 2.0 / (np.sqrt(0.4) + 1e-8)
    np.testing.assert_allclose(p.data, [want], rtol=0, atol=1e-15)
    np.testing.assert_allclose(opt.acc["p"], [0.4], atol=1e-16)


def test_sequence_matches_scalar_recurrence():
    rng = np.random.default_rng(0)
    lr, decay, eps = 3e-3, 0.9, 1e-8
    p = Tensor(np.array([0.5]), requires_grad=True)
    opt = RMSProp(lr=lr, decay=decay, eps=eps)
    ref_p, ref_acc = 0.5, 0.0
    for _ in range(25):
        g = float(rng.normal())
        p.grad = np.array([g])
        opt.step({"p": p})
        ref_p, ref_acc = rmsprop_step_ref(ref_p, g, ref_acc, lr, decay, eps)
        np.testing.assert_allclose(p.data, [ref_p], rtol=1e-15)
        np.testing.assert_allclose(opt.acc["p"], [ref_acc], rtol=1e-15)


def test_missing_gradient_skips_param_but_decays_accumulator():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([2.0])
    opt = RMSProp()
    opt.step({"p": p})
    acc_after_first = opt.acc["p"].copy()
    value = p.data.copy()
    p.grad = None
    opt.step({"p": p})
    np.testing.assert_array_equal(p.data, value)
    np.testing.assert_allclose(opt.acc["p"], 0.9 * acc_after_first, rtol=1e-15)


def test_nonfinite_gradient_rejected_before_any_update():
    a = Tensor(np.array([1.0]), requires_grad=True)
    b = Tensor(np.array([2.0]), requires_grad=True)
    a.grad = np.array([1.0])
    b.grad = np.array([np.nan])
    opt = RMSProp()
    with pytest.raises(NonFiniteGradient, match="b"):
        opt.step({"a": a, "b": b})
    np.testing.assert_array_equal(a.data, [1.0])
    assert not opt.acc


def test_update_order_independent_of_dict_insertion():
    def run(order):
        ps = {name: Tensor(np.array([1.0]), requires_grad=True)
              for name in order}
        opt = RMSProp()
        for i, name in enumerate(order):
            ps[name].grad = np.array([float(i + 1)])
        opt.step({name: ps[name] for name in order})
        return {name: ps[name].data.copy() for name in order}

    fwd = run(["a", "b", "c"])
    # same gradients attached per name, different insertion order
    ps = {name: Tensor(np.array([1.0]), requires_grad=True)
          for name in ["c", "a", "b"]}
    ps["a"].grad = np.array([1.0])
    ps["b"].grad = np.array([2.0])
    ps["c"].grad = np.array([3.0])
    opt = RMSProp()
    opt.step(ps)
    for name in fwd:
        np.testing.assert_array_equal(fwd[name], ps[name].data)


def test_float32_params_stay_float32():
    p = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
    p.grad = np.array([0.5], dtype=np.float32)
    RMSProp().step({"p": p})
    assert p.data.dtype == np.float32

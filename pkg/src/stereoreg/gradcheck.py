"""Central finite-difference verification of analytic gradients.

grad_check perturbs input coordinates one at a time and compares
(f(x+h) - f(x-h)) / 2h to the gradient found by backward(). The per-op
checks used by the command-line `gradcheck` command and the test suite live
in OP_CHECKS so both run the identical battery.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .tensor import Tensor, neg
from . import ops


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tol: float
    checked: int
    worst: Optional[tuple] = None  # (input index, coordinate, analytic, numeric)
    failures: List[str] = field(default_factory=list)

    def __str__(self) -> str:
        state = "pass" if self.passed else "FAIL"
        msg = f"{state}: maxRelError={self.max_rel_error:.3e} tol={self.tol:.1e} ({self.checked} coords)"
        if self.worst is not None and not self.passed:
            idx, coord, a, n = self.worst
            msg += f" worst at input {idx} coord {coord}: analytic={a:.6e} numeric={n:.6e}"
        if self.failures:
            msg += "; " + "; ".join(self.failures)
        return msg


def _coords_to_probe(shape, max_coords, rng):
    total = int(np.prod(shape))
    if max_coords is None or total <= max_coords:
        return list(np.ndindex(*shape))
    flat = rng.choice(total, size=max_coords, replace=False)
    return [np.unravel_index(i, shape) for i in sorted(flat)]


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
               tol: Optional[float] = None, max_coords: Optional[int] = None,
               rng: Optional[np.random.Generator] = None) -> GradCheckReport:
    """Compare backward() gradients of scalar fn(*inputs) to central differences.

    Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-8). The
    default tolerance is 1e-4 in double precision and 1e-2 in single, where
    the differences themselves are noise-dominated. max_coords caps probed
    coordinates per input (sampled without replacement) for large tensors.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if tol is None:
        tol = 1e-4 if all(t.dtype == np.float64 for t in inputs if t.requires_grad) else 1e-2

    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()

    report = GradCheckReport(max_rel_error=0.0, passed=True, tol=tol, checked=0)
    for idx, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(analytic)):
            bad = tuple(np.argwhere(~np.isfinite(analytic))[0])
            report.passed = False
            report.failures.append(f"non-finite analytic gradient at input {idx} coord {bad}")
            continue
        analytic = analytic.copy()
        for coord in _coords_to_probe(t.shape, max_coords, rng):
            orig = t.data[coord]
            t.data[coord] = orig + h
            f_plus = fn(*inputs).item()
            t.data[coord] = orig - h
            f_minus = fn(*inputs).item()
            t.data[coord] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                report.passed = False
                report.failures.append(f"non-finite value probing input {idx} coord {coord}")
                continue
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic[coord])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            report.checked += 1
            if rel > report.max_rel_error:
                report.max_rel_error = rel
                report.worst = (idx, tuple(int(c) for c in coord), a, numeric)
    if report.max_rel_error > tol:
        report.passed = False
    return report


# -- per-op battery -----------------------------------------------------------


def _weighted_sum(out: Tensor, w: np.ndarray) -> Tensor:
    return (out * Tensor(w)).sum()


def _t(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def _away_from_zero(rng, shape, margin=0.2):
    mag = rng.uniform(margin, 1.5, shape)
    sign = np.where(rng.uniform(size=shape) < 0.5, -1.0, 1.0)
    return Tensor(mag * sign, requires_grad=True)


def _check_add(rng):
    x, y = _t(rng, (3, 4)), _t(rng, (4,))
    w = rng.normal(size=(3, 4))
    return lambda a, b: _weighted_sum(a + b, w), [x, y]


def _check_mul(rng):
    x, y = _t(rng, (2, 5)), _t(rng, (2, 5))
    w = rng.normal(size=(2, 5))
    return lambda a, b: _weighted_sum(a * b, w), [x, y]


def _check_abs(rng):
    x = _away_from_zero(rng, (4, 4))
    w = rng.normal(size=(4, 4))
    return lambda a: _weighted_sum(a.abs(), w), [x]


def _check_sum(rng):
    x = _t(rng, (3, 4, 2))
    w = rng.normal(size=(3, 2))
    return lambda a: _weighted_sum(a.sum(axis=1), w), [x]


def _check_reshape(rng):
    x = _t(rng, (3, 8))
    w = rng.normal(size=(3, 2, 4))
    return lambda a: _weighted_sum(a.reshape(3, 2, 4), w), [x]


def _check_relu(rng):
    x = _away_from_zero(rng, (5, 5))
    w = rng.normal(size=(5, 5))
    return lambda a: _weighted_sum(ops.relu(a), w), [x]


def _check_softmax(rng):
    x = _t(rng, (5, 3), -2.0, 2.0)
    w = rng.normal(size=(5, 3))
    return lambda a: _weighted_sum(ops.softmax_axis(a, 0), w), [x]


def _check_log_softmax(rng):
    x = _t(rng, (6, 2), -2.0, 2.0)
    w = rng.normal(size=(6, 2))
    return lambda a: _weighted_sum(ops.log_softmax_axis(a, 0), w), [x]


def _check_conv2d(rng):
    x = _t(rng, (5, 6, 3))
    spec = ops.ConvSpec(kernel=(3, 3), stride=(2, 1), out_channels=2)
    w = _t(rng, spec.weight_shape(3))
    b = _t(rng, (2,))
    proj = rng.normal(size=(3, 6, 2))
    return lambda a, ww, bb: _weighted_sum(ops.conv2d(a, spec, ww, bb), proj), [x, w, b]


def _check_conv3d(rng):
    x = _t(rng, (3, 4, 4, 2))
    spec = ops.ConvSpec(kernel=(3, 3, 3), stride=(1, 2, 1), out_channels=2)
    w = _t(rng, spec.weight_shape(2))
    b = _t(rng, (2,))
    proj = rng.normal(size=(3, 2, 4, 2))
    return lambda a, ww, bb: _weighted_sum(ops.conv3d(a, spec, ww, bb), proj), [x, w, b]


def _check_conv3d_transposed(rng):
    u = _t(rng, (2, 2, 3, 2))
    spec = ops.ConvSpec(kernel=(3, 3, 3), stride=(2, 2, 2), out_channels=3, transposed=True)
    w = _t(rng, spec.weight_shape(2))
    b = _t(rng, (3,))
    proj = rng.normal(size=(4, 4, 6, 3))
    return lambda a, ww, bb: _weighted_sum(ops.conv3d_transposed(a, spec, ww, bb), proj), [u, w, b]


def _check_batch_norm_train(rng):
    x = _t(rng, (4, 5, 3))
    gamma = _t(rng, (3,), 0.5, 1.5)
    beta = _t(rng, (3,))
    proj = rng.normal(size=(4, 5, 3))

    def fn(a, g, bb):
        rm, rv = np.zeros(3), np.ones(3)
        return _weighted_sum(ops.batch_norm(a, g, bb, rm, rv, training=True), proj)
    return fn, [x, gamma, beta]


def _check_batch_norm_eval(rng):
    x = _t(rng, (4, 5, 3))
    gamma = _t(rng, (3,), 0.5, 1.5)
    beta = _t(rng, (3,))
    rm = rng.normal(size=3)
    rv = rng.uniform(0.5, 2.0, 3)
    proj = rng.normal(size=(4, 5, 3))

    def fn(a, g, bb):
        return _weighted_sum(ops.batch_norm(a, g, bb, rm, rv, training=False), proj)
    return fn, [x, gamma, beta]


def _check_upsample3d(rng):
    x = _t(rng, (2, 3, 4, 2))
    proj = rng.normal(size=(4, 6, 8, 2))
    return lambda a: _weighted_sum(ops.upsample3d_linear(a), proj), [x]


def _check_cost_volume(rng):
    left = _t(rng, (4, 6, 3))
    right = _t(rng, (4, 6, 3))
    proj = rng.normal(size=(3, 4, 6, 6))
    return lambda l, r: _weighted_sum(ops.cost_concat_volume(l, r, 3), proj), [left, right]


def _check_soft_argmin(rng):
    from .model import soft_argmin
    costs = _t(rng, (5, 3, 4), -2.0, 2.0)
    proj = rng.normal(size=(3, 4))
    return lambda c: _weighted_sum(soft_argmin(c), proj), [costs]


def _check_l1_loss(rng):
    from .model import l1_loss
    pred = _t(rng, (4, 5), 0.0, 6.0)
    gt = rng.uniform(0.0, 6.0, (4, 5))
    # keep |pred - gt| away from the kink of the absolute value
    gt = np.where(np.abs(pred.data - gt) < 0.05, gt + 0.2, gt)
    mask = rng.uniform(size=(4, 5)) < 0.8
    mask[0, 0] = True
    return lambda p: l1_loss(p, gt, mask), [pred]


def _check_classification_hard(rng):
    from .model import classification_loss
    costs = _t(rng, (6, 3, 4), -2.0, 2.0)
    gt = rng.uniform(0.0, 5.0, (3, 4))
    mask = np.ones((3, 4), dtype=bool)
    return lambda c: classification_loss(c, gt, mask, "hard")[0], [costs]


def _check_classification_soft(rng):
    from .model import classification_loss
    costs = _t(rng, (6, 3, 4), -2.0, 2.0)
    gt = rng.uniform(0.0, 5.0, (3, 4))
    mask = np.ones((3, 4), dtype=bool)
    return lambda c: classification_loss(c, gt, mask, "soft")[0], [costs]


OP_CHECKS = [
    ("add", _check_add),
    ("mul", _check_mul),
    ("abs", _check_abs),
    ("sum", _check_sum),
    ("reshape", _check_reshape),
    ("relu", _check_relu),
    ("softmax", _check_softmax),
    ("log-softmax", _check_log_softmax),
    ("conv2d", _check_conv2d),
    ("conv3d", _check_conv3d),
    ("conv3d-transposed", _check_conv3d_transposed),
    ("batch-norm-train", _check_batch_norm_train),
    ("batch-norm-eval", _check_batch_norm_eval),
    ("upsample3d", _check_upsample3d),
    ("cost-volume", _check_cost_volume),
    ("soft-argmin", _check_soft_argmin),
    ("l1-loss", _check_l1_loss),
    ("classification-hard", _check_classification_hard),
    ("classification-soft", _check_classification_soft),
]

OP_CHECK_NAMES = [name for name, _ in OP_CHECKS]


def run_op_checks(names: Optional[Sequence[str]] = None, seed: int = 0,
                  tol: float = 1e-4) -> List[Tuple[str, GradCheckReport]]:
    """Run the registered per-op finite-difference checks in double precision."""
    wanted = set(names) if names is not None else None
    results = []
    for index, (name, builder) in enumerate(OP_CHECKS):
        if wanted is not None and name not in wanted:
            continue
        rng = np.random.default_rng([seed, index])
        fn, inputs = builder(rng)
        results.append((name, grad_check(fn, inputs, tol=tol)))
    if wanted is not None:
        missing = wanted - {n for n, _ in results}
        if missing:
            raise ValueError(f"unknown op checks: {sorted(missing)}; known: {OP_CHECK_NAMES}")
    return results

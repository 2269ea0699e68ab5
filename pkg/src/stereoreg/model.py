"""End-to-end stereo disparity regression graph.

The network: a shared 2-D feature tower applied to both images (a strided
conv then eight residual blocks), a concatenation cost volume over half the
disparity range at half resolution, 3-D convolutional regularization of that
volume, and a soft argmin that turns the regularized costs into sub-pixel
disparities. Three variants exist: the full hourglass regularizer with four
levels of striding, a single-scale regularizer (layers 19-20 plus the final
upsampling conv), and a unary-only baseline that projects the volume to one
feature and upsamples it trilinearly.

Layer ids: 1-18 tower, 19-37 regularizer, 38 the unary-only projection head.
Layers 18 and 37 (and 38) carry no batch norm and no ReLU so the network can
scale its own cost curves.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, Optional, Tuple, Union

import numpy as np

from .tensor import Tensor, neg
from . import ops

VARIANTS = ("full-hierarchical", "single-scale", "unary-only")
LOSS_KINDS = ("l1-regression", "hard-classification", "soft-classification")

FULL_DIVISOR = 32
HALF_DIVISOR = 2


@dataclass
class ModelConfig:
    f: int = 32
    dmax: int = 192
    height: int = 256
    width: int = 512
    variant: str = "full-hierarchical"
    loss_kind: str = "l1-regression"
    in_channels: int = 1

    @property
    def divisor(self) -> int:
        return FULL_DIVISOR if self.variant == "full-hierarchical" else HALF_DIVISOR

    def validate(self) -> "ModelConfig":
        if self.variant not in VARIANTS:
            raise ValueError(f"variant {self.variant!r} not in {VARIANTS}")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind {self.loss_kind!r} not in {LOSS_KINDS}")
        for name in ("f", "dmax", "height", "width", "in_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        d = self.divisor
        for name in ("height", "width", "dmax"):
            if getattr(self, name) % d:
                raise ValueError(
                    f"{name}={getattr(self, name)} not divisible by {d} "
                    f"(required by variant {self.variant!r})")
        if self.dmax > self.width:
            raise ValueError(f"dmax {self.dmax} exceeds image width {self.width}")
        return self


@dataclass(frozen=True)
class LayerSpec:
    kind: str                 # conv2d | conv3d | conv3d_transposed
    kernel: Tuple[int, ...]
    stride: Tuple[int, ...]
    in_channels: int
    out_channels: int
    bn: bool

    def conv_spec(self) -> ops.ConvSpec:
        return ops.ConvSpec(kernel=self.kernel, stride=self.stride,
                            out_channels=self.out_channels,
                            transposed=self.kind.endswith("transposed"))


_SPECS_CACHE: Dict[tuple, Dict[int, LayerSpec]] = {}


def layer_specs(config: ModelConfig) -> Dict[int, LayerSpec]:
    """Per-layer shape table for the configured variant."""
    key = (config.f, config.in_channels, config.variant)
    cached = _SPECS_CACHE.get(key)
    if cached is None:
        cached = _SPECS_CACHE[key] = _build_layer_specs(config)
    return cached


def _build_layer_specs(config: ModelConfig) -> Dict[int, LayerSpec]:
    F, C = config.f, config.in_channels
    t: Dict[int, LayerSpec] = {
        1: LayerSpec("conv2d", (5, 5), (2, 2), C, F, bn=True),
    }
    for lid in range(2, 18):
        t[lid] = LayerSpec("conv2d", (3, 3), (1, 1), F, F, bn=True)
    t[18] = LayerSpec("conv2d", (3, 3), (1, 1), F, F, bn=False)

    k3, s1, s2 = (3, 3, 3), (1, 1, 1), (2, 2, 2)
    if config.variant == "unary-only":
        t[38] = LayerSpec("conv3d", (1, 1, 1), s1, 2 * F, 1, bn=False)
        return t
    t[19] = LayerSpec("conv3d", k3, s1, 2 * F, F, bn=True)
    t[20] = LayerSpec("conv3d", k3, s1, F, F, bn=True)
    if config.variant == "full-hierarchical":
        t[21] = LayerSpec("conv3d", k3, s2, 2 * F, 2 * F, bn=True)
        t[22] = LayerSpec("conv3d", k3, s1, 2 * F, 2 * F, bn=True)
        t[23] = LayerSpec("conv3d", k3, s1, 2 * F, 2 * F, bn=True)
        t[24] = LayerSpec("conv3d", k3, s2, 2 * F, 2 * F, bn=True)
        t[25] = LayerSpec("conv3d", k3, s1, 2 * F, 2 * F, bn=True)
        t[26] = LayerSpec("conv3d", k3, s1, 2 * F, 2 * F, bn=True)
        t[27] = LayerSpec("conv3d", k3, s2, 2 * F, 2 * F, bn=True)
        t[28] = LayerSpec("conv3d", k3, s1, 2 * F, 2 * F, bn=True)
        t[29] = LayerSpec("conv3d", k3, s1, 2 * F, 2 * F, bn=True)
        t[30] = LayerSpec("conv3d", k3, s2, 2 * F, 4 * F, bn=True)
        t[31] = LayerSpec("conv3d", k3, s1, 4 * F, 4 * F, bn=True)
        t[32] = LayerSpec("conv3d", k3, s1, 4 * F, 4 * F, bn=True)
        t[33] = LayerSpec("conv3d_transposed", k3, s2, 4 * F, 2 * F, bn=True)
        t[34] = LayerSpec("conv3d_transposed", k3, s2, 2 * F, 2 * F, bn=True)
        t[35] = LayerSpec("conv3d_transposed", k3, s2, 2 * F, 2 * F, bn=True)
        t[36] = LayerSpec("conv3d_transposed", k3, s2, 2 * F, F, bn=True)
    t[37] = LayerSpec("conv3d_transposed", k3, s2, F, 1, bn=False)
    return t


class ModelParams:
    """Learnable tensors plus batch-norm running buffers, keyed by layer id.

    The left and right towers run through the same tensors, so mutating a
    tower weight changes both feature maps identically.
    """

    def __init__(self, config: ModelConfig, layers: Dict[int, Dict[str, object]]):
        self.config = config
        self.layers = layers

    def named(self) -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        for lid in sorted(self.layers):
            lp = self.layers[lid]
            for key, field in (("weight", "w"), ("bias", "b"),
                               ("gamma", "gamma"), ("beta", "beta")):
                if field in lp:
                    out[f"layer{lid:02d}.{key}"] = lp[field]
        return out

    def buffers(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for lid in sorted(self.layers):
            lp = self.layers[lid]
            if "rm" in lp:
                out[f"layer{lid:02d}.running_mean"] = lp["rm"]
                out[f"layer{lid:02d}.running_var"] = lp["rv"]
        return out

    def count(self) -> int:
        return sum(t.size for t in self.named().values())

    def zero_grad(self) -> None:
        for t in self.named().values():
            t.grad = None


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Fan-in-scaled normal init for conv weights (rectifier gain), zero
    biases, unit gamma, zero beta. Deterministic for a given seed."""
    config.validate()
    rng = np.random.default_rng(seed)
    specs = layer_specs(config)
    layers: Dict[int, Dict[str, object]] = {}
    for lid in sorted(specs):
        spec = specs[lid]
        wshape = spec.conv_spec().weight_shape(spec.in_channels)
        fan_in = int(np.prod(spec.kernel)) * spec.in_channels
        std = np.sqrt(2.0 / fan_in)
        lp: Dict[str, object] = {
            "w": Tensor((rng.normal(0.0, std, wshape)).astype(dtype), requires_grad=True),
            "b": Tensor(np.zeros(spec.out_channels, dtype=dtype), requires_grad=True),
        }
        if spec.bn:
            lp["gamma"] = Tensor(np.ones(spec.out_channels, dtype=dtype), requires_grad=True)
            lp["beta"] = Tensor(np.zeros(spec.out_channels, dtype=dtype), requires_grad=True)
            lp["rm"] = np.zeros(spec.out_channels, dtype=dtype)
            lp["rv"] = np.ones(spec.out_channels, dtype=dtype)
        layers[lid] = lp
    return ModelParams(config, layers)


def _apply_layer(x: Tensor, lid: int, params: ModelParams, training: bool,
                 activate: bool = True) -> Tensor:
    spec = layer_specs(params.config)[lid]
    lp = params.layers[lid]
    cs = spec.conv_spec()
    if spec.kind == "conv2d":
        y = ops.conv2d(x, cs, lp["w"], lp["b"])
    elif spec.kind == "conv3d":
        y = ops.conv3d(x, cs, lp["w"], lp["b"])
    else:
        y = ops.conv3d_transposed(x, cs, lp["w"], lp["b"])
    if spec.bn:
        y = ops.batch_norm(y, lp["gamma"], lp["beta"], lp["rm"], lp["rv"], training)
        if activate:
            y = ops.relu(y)
    return y


def unary_tower(image: Tensor, params: ModelParams, training: bool = False,
                trace: Optional[dict] = None) -> Tensor:
    """Strided conv then eight residual blocks then a bare conv.

    Residual blocks run conv+BN+ReLU, conv+BN, then add the block input with
    no extra activation. The final conv (layer 18) has neither BN nor ReLU.
    """
    if image.ndim != 3:
        raise ValueError(f"expected (H, W, C) image, got shape {image.shape}")
    if image.shape[0] % 2 or image.shape[1] % 2:
        raise ValueError(f"image extents must be even, got {image.shape[:2]}")
    x = _apply_layer(image, 1, params, training)
    if trace is not None:
        trace[1] = x.shape
    skip = x
    for block in range(8):
        a = _apply_layer(skip, 2 + 2 * block, params, training)
        c = _apply_layer(a, 3 + 2 * block, params, training, activate=False)
        skip = c + skip
        if trace is not None:
            trace[2 + 2 * block] = a.shape
            trace[3 + 2 * block] = c.shape
            trace[f"add{3 + 2 * block}"] = skip.shape
    out = _apply_layer(skip, 18, params, training)
    if trace is not None:
        trace[18] = out.shape
    return out


def build_cost_volume(left_feat: Tensor, right_feat: Tensor, dmax: int) -> Tensor:
    """Concatenation volume over dmax/2 disparity levels at half resolution."""
    if dmax % 2:
        raise ValueError(f"dmax must be even, got {dmax}")
    levels = dmax // 2
    if levels > left_feat.shape[1]:
        raise ValueError(
            f"disparity range {levels} exceeds feature width {left_feat.shape[1]}")
    return ops.cost_concat_volume(left_feat, right_feat, levels)


def regularize(volume: Tensor, params: ModelParams, training: bool = False,
               trace: Optional[dict] = None) -> Tensor:
    """3-D regularization of the cost volume down to one feature at full scale.

    The full variant runs the four-level encoder (strided convs at 21, 24,
    27, 30, each branching from the tensor before the previous level's pair
    of stride-1 convs), a mirrored decoder of transposed convs (33-36) with
    residual additions from layers 29, 26, 23 and 20, and a final
    single-feature transposed conv. The single-scale variant runs layers
    19-20 plus that final conv only.
    """
    variant = params.config.variant
    if variant == "unary-only":
        raise ValueError("unary-only variant has no regularizer")
    if variant == "full-hierarchical":
        for i, n in enumerate(volume.shape[:3]):
            if n % 16:
                raise ValueError(
                    f"volume axis {i} extent {n} not divisible by 16 "
                    "(four internal halvings)")

    def lay(x, lid, activate=True):
        y = _apply_layer(x, lid, params, training, activate)
        if trace is not None:
            trace[lid] = y.shape
        return y

    x19 = lay(volume, 19)
    x20 = lay(x19, 20)
    if variant == "single-scale":
        return lay(x20, 37)
    x21 = lay(volume, 21)
    x23 = lay(lay(x21, 22), 23)
    x24 = lay(x21, 24)
    x26 = lay(lay(x24, 25), 26)
    x27 = lay(x24, 27)
    x29 = lay(lay(x27, 28), 29)
    x30 = lay(x27, 30)
    x32 = lay(lay(x30, 31), 32)
    x33 = lay(x32, 33) + x29
    x34 = lay(x33, 34) + x26
    x35 = lay(x34, 35) + x23
    x36 = lay(x35, 36) + x20
    if trace is not None:
        trace["add33"] = x33.shape
        trace["add34"] = x34.shape
        trace["add35"] = x35.shape
        trace["add36"] = x36.shape
    return lay(x36, 37)


def soft_argmin(costs: Tensor) -> Tensor:
    """Expectation of the disparity index under softmax of negated costs.

    Input (D, H, W) or (D, H, W, 1); output (H, W) with every value inside
    [0, D-1] (a convex combination of the bin indices; the final clip only
    trims float round-off dust at the boundary).
    """
    if costs.ndim == 4:
        if costs.shape[-1] != 1:
            raise ValueError(f"expected one feature, got shape {costs.shape}")
        costs = costs.reshape(costs.shape[:3])
    if costs.ndim != 3:
        raise ValueError(f"expected (D, H, W) costs, got shape {costs.shape}")
    D = costs.shape[0]
    probs = ops.softmax_axis(neg(costs), axis=0)
    bins = np.arange(D, dtype=costs.dtype).reshape(D, 1, 1)
    disp = (probs * Tensor(bins)).sum(axis=0)
    disp.data = np.clip(disp.data, 0.0, float(D - 1))
    return disp


def l1_loss(pred: Tensor, gt: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean absolute disparity error over the valid pixels."""
    gt = np.asarray(gt)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != gt.shape or pred.shape != mask.shape:
        raise ValueError(
            f"shape mismatch: pred {pred.shape}, gt {gt.shape}, mask {mask.shape}")
    n = int(mask.sum())
    if n == 0:
        raise ValueError("empty mask: no labeled pixels to average over")
    diff = pred - Tensor(gt.astype(pred.dtype, copy=False))
    masked = diff.abs() * Tensor(mask.astype(pred.dtype))
    return masked.sum() * (1.0 / n)


def classification_loss(costs: Tensor, gt: np.ndarray, mask: np.ndarray,
                        kind: str) -> Tuple[Tensor, int]:
    """Cross entropy between softmax(-costs) and a per-pixel target
    distribution: one-hot at the rounded bin ("hard"), or a discretized
    unit-sigma Gaussian around it renormalized over the bins ("soft").

    Ground-truth values rounding outside [0, D) are dropped from the mask;
    the count of dropped pixels is returned alongside the loss.
    """
    if kind not in ("hard", "soft"):
        raise ValueError(f"kind must be 'hard' or 'soft', got {kind!r}")
    if costs.ndim != 3:
        raise ValueError(f"expected (D, H, W) costs, got shape {costs.shape}")
    gt = np.asarray(gt)
    mask = np.asarray(mask, dtype=bool)
    D = costs.shape[0]
    if gt.shape != costs.shape[1:] or mask.shape != gt.shape:
        raise ValueError(
            f"shape mismatch: costs {costs.shape}, gt {gt.shape}, mask {mask.shape}")
    # nearest bin, ties rounded up
    r = np.floor(gt + 0.5).astype(np.int64)
    valid = mask & (r >= 0) & (r < D)
    excluded = int(mask.sum() - valid.sum())
    n = int(valid.sum())
    if n == 0:
        raise ValueError("empty mask after range filtering")
    dtype = costs.dtype
    if kind == "hard":
        target = np.zeros(costs.shape, dtype=dtype)
        ys, xs = np.nonzero(valid)
        target[r[ys, xs], ys, xs] = 1.0
    else:
        bins = np.arange(D, dtype=np.float64).reshape(D, 1, 1)
        w = np.exp(-0.5 * (bins - r[None, :, :]) ** 2)
        w *= valid[None, :, :]
        z = w.sum(axis=0, keepdims=True)
        z[z == 0] = 1.0
        target = (w / z).astype(dtype)
    log_probs = ops.log_softmax_axis(neg(costs), axis=0)
    loss = (log_probs * Tensor(target)).sum() * (-1.0 / n)
    return loss, excluded


@dataclass
class ForwardResult:
    disparity: Tensor   # (H, W)
    costs: Tensor       # (D, H, W)


def _as_tensor_image(img: Union[Tensor, np.ndarray]) -> Tensor:
    return img if isinstance(img, Tensor) else Tensor(img)


def forward(left: Union[Tensor, np.ndarray], right: Union[Tensor, np.ndarray],
            params: ModelParams, training: bool = False,
            trace: Optional[dict] = None) -> ForwardResult:
    """Full pipeline: shared towers, cost volume, regularization, soft argmin.

    Images are (H, W, C) with intensities already normalized to [-1, 1] and
    extents divisible by the variant's divisor (32 for the full hourglass,
    2 otherwise). The unary-only variant projects the volume to one feature
    with layer 38 and upsamples it trilinearly instead of regularizing.
    """
    config = params.config
    left, right = _as_tensor_image(left), _as_tensor_image(right)
    if left.shape != right.shape:
        raise ValueError(f"image shapes differ: {left.shape} vs {right.shape}")
    if left.ndim != 3 or left.shape[2] != config.in_channels:
        raise ValueError(
            f"expected (H, W, {config.in_channels}) images, got {left.shape}")
    H, W = left.shape[:2]
    d = config.divisor
    if H % d or W % d:
        raise ValueError(f"image extents {H}x{W} not divisible by {d}")
    if config.dmax > W:
        raise ValueError(f"dmax {config.dmax} exceeds image width {W}")

    lf = unary_tower(left, params, training, trace)
    rf = unary_tower(right, params, training)
    vol = build_cost_volume(lf, rf, config.dmax)
    if trace is not None:
        trace["volume"] = vol.shape
    if config.variant == "unary-only":
        proj = _apply_layer(vol, 38, params, training)
        if trace is not None:
            trace[38] = proj.shape
        full = ops.upsample3d_linear(proj)
        if trace is not None:
            trace["upsample"] = full.shape
    else:
        full = regularize(vol, params, training, trace)
    costs = full.reshape(full.shape[:3])
    disp = soft_argmin(costs)
    if trace is not None:
        trace["argmin"] = disp.shape
    return ForwardResult(disparity=disp, costs=costs)


def config_for_extents(config: ModelConfig, height: int, width: int) -> ModelConfig:
    """The same model contract re-targeted at other image extents (the
    parameters are extent-independent)."""
    return replace(config, height=height, width=width).validate()


# -- architecture audit -------------------------------------------------------


@dataclass(frozen=True)
class AuditRow:
    label: str          # layer id, id range, or "" for unnumbered rows
    description: str
    dims: str           # symbolic, e.g. "1/2D x 1/2H x 1/2W x 2F"
    params: int


def _dims(*parts: str) -> str:
    return " x ".join(parts)


def _layer_param_count(spec: LayerSpec) -> int:
    n = int(np.prod(spec.kernel)) * spec.in_channels * spec.out_channels
    n += spec.out_channels                    # bias
    if spec.bn:
        n += 2 * spec.out_channels            # gamma, beta
    return n


def audit_rows(config: ModelConfig) -> list:
    """Layer-by-layer table of the configured variant: symbolic output
    extents and learnable parameter counts."""
    config.validate()
    specs = layer_specs(config)
    csym = "C" if config.in_channels != 1 else "1"
    rows = [AuditRow("", "input image", _dims("H", "W", csym), 0)]
    rows.append(AuditRow("1", "5x5 conv, F features, stride 2",
                         _dims("1/2H", "1/2W", "F"), _layer_param_count(specs[1])))
    rows.append(AuditRow("2", "3x3 conv, F features",
                         _dims("1/2H", "1/2W", "F"), _layer_param_count(specs[2])))
    rows.append(AuditRow("3", "3x3 conv, F features",
                         _dims("1/2H", "1/2W", "F"), _layer_param_count(specs[3])))
    rows.append(AuditRow("", "add layer 1 and 3 features (residual)",
                         _dims("1/2H", "1/2W", "F"), 0))
    repeat = sum(_layer_param_count(specs[lid]) for lid in range(4, 18))
    rows.append(AuditRow("4-17", "(repeat layers 2,3 and residual add) x7",
                         _dims("1/2H", "1/2W", "F"), repeat))
    rows.append(AuditRow("18", "3x3 conv, F features (no ReLU or BN)",
                         _dims("1/2H", "1/2W", "F"), _layer_param_count(specs[18])))
    rows.append(AuditRow("", "concatenation cost volume",
                         _dims("1/2D", "1/2H", "1/2W", "2F"), 0))

    def reg_row(lid, desc, dims):
        rows.append(AuditRow(str(lid), desc, dims, _layer_param_count(specs[lid])))

    if config.variant == "unary-only":
        reg_row(38, "1x1x1 conv, 1 feature (no ReLU or BN)",
                _dims("1/2D", "1/2H", "1/2W", "1"))
        rows.append(AuditRow("", "trilinear x2 upsampling",
                             _dims("D", "H", "W", "1"), 0))
    else:
        half = _dims("1/2D", "1/2H", "1/2W", "F")
        reg_row(19, "3-D conv, 3x3x3, F features", half)
        reg_row(20, "3-D conv, 3x3x3, F features", half)
        if config.variant == "full-hierarchical":
            quarter = _dims("1/4D", "1/4H", "1/4W", "2F")
            eighth = _dims("1/8D", "1/8H", "1/8W", "2F")
            sixteenth = _dims("1/16D", "1/16H", "1/16W", "2F")
            thirty2 = _dims("1/32D", "1/32H", "1/32W", "4F")
            reg_row(21, "from cost volume: 3-D conv, 3x3x3, 2F features, stride 2", quarter)
            reg_row(22, "3-D conv, 3x3x3, 2F features", quarter)
            reg_row(23, "3-D conv, 3x3x3, 2F features", quarter)
            reg_row(24, "from layer 21: 3-D conv, 3x3x3, 2F features, stride 2", eighth)
            reg_row(25, "3-D conv, 3x3x3, 2F features", eighth)
            reg_row(26, "3-D conv, 3x3x3, 2F features", eighth)
            reg_row(27, "from layer 24: 3-D conv, 3x3x3, 2F features, stride 2", sixteenth)
            reg_row(28, "3-D conv, 3x3x3, 2F features", sixteenth)
            reg_row(29, "3-D conv, 3x3x3, 2F features", sixteenth)
            reg_row(30, "from layer 27: 3-D conv, 3x3x3, 4F features, stride 2", thirty2)
            reg_row(31, "3-D conv, 3x3x3, 4F features", thirty2)
            reg_row(32, "3-D conv, 3x3x3, 4F features", thirty2)
            reg_row(33, "3-D transposed conv, 3x3x3, 2F features, stride 2", sixteenth)
            rows.append(AuditRow("", "add layer 33 and 29 features (residual)", sixteenth, 0))
            reg_row(34, "3-D transposed conv, 3x3x3, 2F features, stride 2", eighth)
            rows.append(AuditRow("", "add layer 34 and 26 features (residual)", eighth, 0))
            reg_row(35, "3-D transposed conv, 3x3x3, 2F features, stride 2", quarter)
            rows.append(AuditRow("", "add layer 35 and 23 features (residual)", quarter, 0))
            reg_row(36, "3-D transposed conv, 3x3x3, F features, stride 2", half)
            rows.append(AuditRow("", "add layer 36 and 20 features (residual)", half, 0))
        reg_row(37, "3-D transposed conv, 3x3x3, 1 feature, stride 2 (no ReLU or BN)",
                _dims("D", "H", "W", "1"))
    rows.append(AuditRow("", "soft argmin over disparity", _dims("H", "W"), 0))
    return rows


def parameter_count(config: ModelConfig) -> int:
    specs = layer_specs(config.validate())
    return sum(_layer_param_count(s) for s in specs.values())


def eval_dims(dims: str, H: int, W: int, D: int, F: int, C: int = 1) -> Tuple[int, ...]:
    """Evaluate a symbolic extent string at concrete sizes."""
    values = {"H": H, "W": W, "D": D, "F": F, "C": C, "1": 1,
              "2F": 2 * F, "4F": 4 * F}
    out = []
    for part in dims.split(" x "):
        if "/" in part:
            frac, sym = part.split("/")
            num = int(frac)
            den, axis = sym[:-1], sym[-1]
            out.append(num * values[axis] // int(den))
        else:
            out.append(values[part])
    return tuple(out)

"""Neural-network operators over Tensors: strided convolution (2-D and 3-D),
transposed convolution, batch normalization, ReLU, softmax family, linear
upsampling, and the stereo concatenation volume.

Convolutions use zero padding sized so a stride-1 conv preserves extent and a
stride-s conv yields ceil(n/s). The transposed convolution with stride s maps
extent m to m*s and is the exact adjoint of the matching forward conv on
stride-aligned extents: dot(conv(x), y) == dot(x, conv_transposed(y)) with
shared weights and zero bias.

Implementation is im2col + matrix multiply. Weight layouts (channels last):
forward conv (k..., Cin, Cout); transposed conv (k..., Cout, Cin), i.e. the
weight tensor of the forward conv whose adjoint it computes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .tensor import Tensor, accumulate_grad


@dataclass(frozen=True)
class ConvSpec:
    """Shape contract for one convolution layer."""

    kernel: Tuple[int, ...]
    stride: Tuple[int, ...]
    out_channels: int
    transposed: bool = False
    padding: str = "same"

    def __post_init__(self):
        if len(self.kernel) != len(self.stride):
            raise ValueError(f"kernel rank {len(self.kernel)} != stride rank {len(self.stride)}")
        if any(k < 1 for k in self.kernel) or any(s < 1 for s in self.stride):
            raise ValueError(f"kernel and stride extents must be >= 1, got {self.kernel}, {self.stride}")
        if self.out_channels < 1:
            raise ValueError("out_channels must be >= 1")
        if self.padding != "same":
            raise ValueError(f"unsupported padding mode {self.padding!r}")

    @property
    def spatial_rank(self) -> int:
        return len(self.kernel)

    def weight_shape(self, in_channels: int) -> Tuple[int, ...]:
        if self.transposed:
            return self.kernel + (self.out_channels, in_channels)
        return self.kernel + (in_channels, self.out_channels)


def ceil_div(n: int, s: int) -> int:
    return -(-n // s)


def _same_pads(n: int, k: int, s: int) -> Tuple[int, int]:
    total = max((ceil_div(n, s) - 1) * s + k - n, 0)
    before = total // 2
    return before, total - before


def _im2col(xp: np.ndarray, kernel, stride, out_ext) -> np.ndarray:
    """Gather all kernel windows of padded input xp into rows.

    Returns (prod(out_ext), prod(kernel)*C) with window layout
    (out..., kernel..., C) flattened row-major; the reshape makes a copy.
    """
    d = len(kernel)
    C = xp.shape[-1]
    st = xp.strides
    shape = tuple(out_ext) + tuple(kernel) + (C,)
    strides = tuple(st[i] * stride[i] for i in range(d)) + st[:d] + (st[-1],)
    win = np.lib.stride_tricks.as_strided(xp, shape=shape, strides=strides, writeable=False)
    sites = int(np.prod(out_ext))
    return win.reshape(sites, int(np.prod(kernel)) * C)


def _col2im(cols: np.ndarray, padded_shape, kernel, stride, out_ext) -> np.ndarray:
    """Adjoint of _im2col: scatter-add window rows back into a padded array."""
    d = len(kernel)
    C = padded_shape[-1]
    colsr = cols.reshape(tuple(out_ext) + tuple(kernel) + (C,))
    xp = np.zeros(padded_shape, dtype=cols.dtype)
    lead = (slice(None),) * d
    for idx in np.ndindex(*kernel):
        dest = tuple(slice(i, i + (o - 1) * s + 1, s)
                     for i, o, s in zip(idx, out_ext, stride))
        xp[dest + (slice(None),)] += colsr[lead + idx + (slice(None),)]
    return xp


def _check_conv_args(x: Tensor, spec: ConvSpec, w: Tensor, b: Tensor, rank: int,
                     transposed: bool) -> None:
    if spec.spatial_rank != rank:
        raise ValueError(f"spec has {spec.spatial_rank} spatial axes, expected {rank}")
    if spec.transposed != transposed:
        raise ValueError(f"spec.transposed={spec.transposed}, operation requires {transposed}")
    if x.ndim != rank + 1:
        raise ValueError(f"input must have {rank + 1} axes (spatial + channels), got {x.ndim}")
    in_ch = x.shape[-1]
    expect = spec.weight_shape(in_ch)
    if w.shape != expect:
        raise ValueError(
            f"weight shape {w.shape} does not match spec: expected {expect} "
            f"for input channels {in_ch} (channel axis {rank})")
    if b.shape != (spec.out_channels,):
        raise ValueError(f"bias shape {b.shape} != ({spec.out_channels},)")


def _conv_forward(x: Tensor, w: Tensor, b: Tensor, stride) -> Tensor:
    d = w.ndim - 2
    kernel = w.shape[:d]
    cin, cout = w.shape[d], w.shape[d + 1]
    if x.shape[-1] != cin:
        raise ValueError(
            f"channel mismatch on axis {d}: input has {x.shape[-1]} channels, "
            f"weights expect {cin}")
    spatial = x.shape[:d]
    out_ext = tuple(ceil_div(n, s) for n, s in zip(spatial, stride))
    pads = [_same_pads(n, k, s) for n, k, s in zip(spatial, kernel, stride)]
    xp = np.pad(x.data, pads + [(0, 0)])
    padded_shape = xp.shape
    cols = _im2col(xp, kernel, stride, out_ext)
    del xp
    wmat = w.data.reshape(-1, cout)
    y = cols @ wmat
    y += b.data
    grad_needed = x.requires_grad or w.requires_grad or b.requires_grad
    out = Tensor(y.reshape(out_ext + (cout,)), requires_grad=grad_needed,
                 op=f"conv{d}d", parents=(x, w, b))
    if grad_needed:
        def _bw(g):
            gf = np.ascontiguousarray(g).reshape(-1, cout)
            if w.requires_grad:
                accumulate_grad(w, (cols.T @ gf).reshape(w.shape), owned=True)
            if b.requires_grad:
                accumulate_grad(b, gf.sum(axis=0), owned=True)
            if x.requires_grad:
                dxp = _col2im(gf @ wmat.T, padded_shape, kernel, stride, out_ext)
                crop = tuple(slice(pb, pb + n) for (pb, _), n in zip(pads, spatial))
                accumulate_grad(x, dxp[crop + (slice(None),)], owned=True)
        out._backward = _bw
    return out


def conv2d(x: Tensor, spec: ConvSpec, w: Tensor, b: Tensor) -> Tensor:
    """Zero-padded strided cross-correlation on (H, W, Cin)."""
    _check_conv_args(x, spec, w, b, rank=2, transposed=False)
    return _conv_forward(x, w, b, spec.stride)


def conv3d(x: Tensor, spec: ConvSpec, w: Tensor, b: Tensor) -> Tensor:
    """Zero-padded strided cross-correlation on (D, H, W, Cin)."""
    _check_conv_args(x, spec, w, b, rank=3, transposed=False)
    return _conv_forward(x, w, b, spec.stride)


def _conv_transposed_forward(u: Tensor, w: Tensor, b: Tensor, stride) -> Tensor:
    d = w.ndim - 2
    kernel = w.shape[:d]
    cout, cin = w.shape[d], w.shape[d + 1]
    if u.shape[-1] != cin:
        raise ValueError(
            f"channel mismatch on axis {d}: input has {u.shape[-1]} channels, "
            f"weights expect {cin}")
    m = u.shape[:d]
    out_spatial = tuple(n * s for n, s in zip(m, stride))
    pads = [_same_pads(n, k, s) for n, k, s in zip(out_spatial, kernel, stride)]
    for (n, k, s, o) in zip(out_spatial, kernel, stride, m):
        if ceil_div(n, s) != o:
            raise ValueError(f"output extent {n} not reconstructible from input {o} at stride {s}")
    padded_shape = tuple(n + pb + pa for n, (pb, pa) in zip(out_spatial, pads)) + (cout,)
    wmat = w.data.reshape(-1, cin)
    uf = u.data.reshape(-1, cin)
    cols = uf @ wmat.T
    yp = _col2im(cols, padded_shape, kernel, stride, m)
    crop = tuple(slice(pb, pb + n) for (pb, _), n in zip(pads, out_spatial))
    y = yp[crop + (slice(None),)] + b.data
    grad_needed = u.requires_grad or w.requires_grad or b.requires_grad
    out = Tensor(y, requires_grad=grad_needed, op=f"conv{d}d_transposed",
                 parents=(u, w, b))
    if grad_needed:
        def _bw(g):
            gp = np.pad(g, pads + [(0, 0)])
            gcols = _im2col(gp, kernel, stride, m)
            if u.requires_grad:
                accumulate_grad(u, (gcols @ wmat).reshape(u.shape), owned=True)
            if w.requires_grad:
                accumulate_grad(w, (gcols.T @ uf).reshape(w.shape), owned=True)
            if b.requires_grad:
                accumulate_grad(b, g.reshape(-1, cout).sum(axis=0), owned=True)
        out._backward = _bw
    return out


def conv3d_transposed(u: Tensor, spec: ConvSpec, w: Tensor, b: Tensor) -> Tensor:
    """Stride-s upsampling conv on (D, H, W, Cin), extents mapped to n*s.

    Computes the adjoint of the matching forward conv3d, so the weight layout
    is that forward conv's (k, k, k, out_channels, in_channels).
    """
    _check_conv_args(u, spec, w, b, rank=3, transposed=True)
    return _conv_transposed_forward(u, w, b, spec.stride)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, eps: float = 1e-5,
               momentum: float = 0.9) -> Tensor:
    """Per-channel normalization over all non-channel axes (channels last).

    Training mode uses batch statistics (biased variance) and folds them into
    the running buffers in place: running <- momentum*running + (1-m)*batch.
    Inference mode normalizes with the running buffers.
    """
    if x.ndim < 2:
        raise ValueError(f"batch_norm input needs spatial and channel axes, got shape {x.shape}")
    C = x.shape[-1]
    for name, t in (("gamma", gamma), ("beta", beta)):
        if t.shape != (C,):
            raise ValueError(f"{name} shape {t.shape} != ({C},)")
    if running_mean.shape != (C,) or running_var.shape != (C,):
        raise ValueError(f"running stats must have shape ({C},)")
    axes = tuple(range(x.ndim - 1))
    m = int(np.prod(x.shape[:-1]))
    if m == 0:
        raise ValueError("zero-element channel")
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x.data - mu) * inv
    y = gamma.data * xhat + beta.data
    grad_needed = x.requires_grad or gamma.requires_grad or beta.requires_grad
    out = Tensor(y, requires_grad=grad_needed, op="batch_norm",
                 parents=(x, gamma, beta))
    if grad_needed:
        def _bw(g):
            if gamma.requires_grad:
                accumulate_grad(gamma, (g * xhat).sum(axis=axes), owned=True)
            if beta.requires_grad:
                accumulate_grad(beta, g.sum(axis=axes), owned=True)
            if x.requires_grad:
                dxhat = g * gamma.data
                if training:
                    s1 = dxhat.sum(axis=axes)
                    s2 = (dxhat * xhat).sum(axis=axes)
                    dx = (inv / m) * (m * dxhat - s1 - xhat * s2)
                else:
                    dx = dxhat * inv
                accumulate_grad(x, dx, owned=True)
        out._backward = _bw
    return out


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); subgradient at exactly 0 is 0."""
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, x.dtype.type(0)),
                 requires_grad=x.requires_grad, op="relu", parents=(x,))
    if x.requires_grad:
        def _bw(g):
            accumulate_grad(x, g * mask, owned=True)
        out._backward = _bw
    return out


def softmax_axis(x: Tensor, axis: int) -> Tensor:
    """Softmax along one axis, computed with max subtraction."""
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} out of range for {x.ndim} axes")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s, requires_grad=x.requires_grad, op="softmax", parents=(x,))
    if x.requires_grad:
        def _bw(g):
            dot = (g * s).sum(axis=axis, keepdims=True)
            accumulate_grad(x, s * (g - dot), owned=True)
        out._backward = _bw
    return out


def log_softmax_axis(x: Tensor, axis: int) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} out of range for {x.ndim} axes")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = Tensor(y, requires_grad=x.requires_grad, op="log_softmax", parents=(x,))
    if x.requires_grad:
        sm = np.exp(y)

        def _bw(g):
            accumulate_grad(x, g - sm * g.sum(axis=axis, keepdims=True), owned=True)
        out._backward = _bw
    return out


def _linear_upsample_matrix(n: int, dtype) -> np.ndarray:
    """Interpolation weights doubling an axis; sample centers at o/2 - 0.25."""
    M = np.zeros((2 * n, n), dtype=dtype)
    for o in range(2 * n):
        t = 0.5 * o - 0.25
        if t <= 0.0:
            M[o, 0] = 1.0
        elif t >= n - 1:
            M[o, n - 1] = 1.0
        else:
            i0 = int(np.floor(t))
            f = t - i0
            M[o, i0] = 1.0 - f
            M[o, i0 + 1] = f
    return M


def upsample3d_linear(x: Tensor) -> Tensor:
    """Trilinear x2 upsampling of (D, H, W, C) along the three spatial axes."""
    if x.ndim != 4:
        raise ValueError(f"expected (D, H, W, C) input, got shape {x.shape}")
    D, H, W, _ = x.shape
    Md = _linear_upsample_matrix(D, x.dtype)
    Mh = _linear_upsample_matrix(H, x.dtype)
    Mw = _linear_upsample_matrix(W, x.dtype)

    def apply(a, m0, m1, m2):
        a = np.einsum("ij,jhwc->ihwc", m0, a)
        a = np.einsum("ij,djwc->diwc", m1, a)
        return np.einsum("ij,dhjc->dhic", m2, a)

    y = apply(x.data, Md, Mh, Mw)
    out = Tensor(y, requires_grad=x.requires_grad, op="upsample3d", parents=(x,))
    if x.requires_grad:
        def _bw(g):
            accumulate_grad(x, apply(g, Md.T, Mh.T, Mw.T), owned=True)
        out._backward = _bw
    return out


def cost_concat_volume(left: Tensor, right: Tensor, levels: int) -> Tensor:
    """Stack per-disparity channel concatenations of two feature maps.

    Output (levels, H, W, 2F): slice d holds left features at every (y, x)
    concatenated with right features at (y, x-d), zero-filled where x-d < 0.
    Gradients route to both inputs.
    """
    if left.shape != right.shape:
        raise ValueError(f"feature maps differ: {left.shape} vs {right.shape}")
    if left.ndim != 3:
        raise ValueError(f"expected (H, W, F) feature maps, got shape {left.shape}")
    H, W, F = left.shape
    if not 1 <= levels <= W:
        raise ValueError(f"disparity levels {levels} outside [1, width {W}]")
    vol = np.zeros((levels, H, W, 2 * F), dtype=left.dtype)
    vol[:, :, :, :F] = left.data
    for d in range(levels):
        vol[d, :, d:, F:] = right.data[:, :W - d if d else W]
    grad_needed = left.requires_grad or right.requires_grad
    out = Tensor(vol, requires_grad=grad_needed, op="cost_volume",
                 parents=(left, right))
    if grad_needed:
        def _bw(g):
            if left.requires_grad:
                accumulate_grad(left, g[:, :, :, :F].sum(axis=0), owned=True)
            if right.requires_grad:
                gr = np.zeros(right.shape, dtype=g.dtype)
                for d in range(levels):
                    gr[:, :W - d if d else W] += g[d, :, d:, F:]
                accumulate_grad(right, gr, owned=True)
        out._backward = _bw
    return out

"""Stereo data handling.

Covers synthetic pair generation with exact ground truth, the PFM
floating-point map format, portable-pixmap images (PGM/PPM, ascii and
binary), validity masks, and line-delimited dataset manifests.

Conventions: images are (H, W, C) float arrays in [0, 1], top-down row
order, channels innermost. Ground truth disparity is left-referenced: the
scene point at left-image column x appears in the right image at column
x - d(x). Pixels whose correspondence falls outside the right image, and
background pixels occluded by the foreground plane, are marked invalid in
the sample mask.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

TEXTURES = ("random-dot", "smooth-noise")
FIELDS = ("constant", "two-plane", "ramp")


@dataclass
class StereoSample:
    left: np.ndarray    # (H, W, C) in [0, 1]
    right: np.ndarray   # (H, W, C) in [0, 1]
    gt: np.ndarray      # (H, W) disparity in pixels
    mask: np.ndarray    # (H, W) bool, True = labeled

    def validate(self) -> "StereoSample":
        H, W = self.gt.shape
        if self.left.shape != self.right.shape or self.left.shape[:2] != (H, W):
            raise ValueError(
                f"extent mismatch: left {self.left.shape}, right {self.right.shape}, "
                f"gt {self.gt.shape}")
        if self.mask.shape != (H, W) or self.mask.dtype != np.bool_:
            raise ValueError(f"mask must be (H, W) bool, got {self.mask.shape} {self.mask.dtype}")
        if not np.all(np.isfinite(self.gt[self.mask])):
            raise ValueError("gt must be finite wherever mask is true")
        return self


@dataclass
class SynthSpec:
    """Recipe for one synthetic pair.

    d_range semantics depend on the field kind: constant uses d_range[0];
    two-plane reads (background, foreground) disparities; ramp reads the
    disparities at the left and right image edges (linear in x between).
    """
    height: int = 64
    width: int = 128
    texture: str = "random-dot"
    field: str = "constant"
    d_range: Tuple[float, ...] = (4.0,)
    occlusion_exclude: bool = True
    seed: int = 0
    channels: int = 1
    dmax: Optional[int] = None
    dtype: type = np.float32
    fg_span: Tuple[float, float] = (0.3, 0.7)

    def validate(self) -> "SynthSpec":
        if self.texture not in TEXTURES:
            raise ValueError(f"texture {self.texture!r} not in {TEXTURES}")
        if self.field not in FIELDS:
            raise ValueError(f"field {self.field!r} not in {FIELDS}")
        if self.height < 1 or self.width < 2 or self.channels < 1:
            raise ValueError("degenerate extents")
        need = {"constant": 1, "two-plane": 2, "ramp": 2}[self.field]
        if len(self.d_range) < need:
            raise ValueError(f"field {self.field!r} needs {need} d_range entries")
        ds = self.d_range[:need]
        if any(d < 0 for d in ds):
            raise ValueError(f"disparities must be nonnegative, got {ds}")
        top = max(ds)
        if top >= self.width:
            raise ValueError(f"max disparity {top} must be below image width {self.width}")
        if self.dmax is not None and top >= self.dmax:
            raise ValueError(f"max disparity {top} must be below dmax {self.dmax}")
        if self.field == "two-plane":
            if ds[1] <= ds[0]:
                raise ValueError("two-plane needs foreground disparity above background")
            if not 0.0 <= self.fg_span[0] < self.fg_span[1] <= 1.0:
                raise ValueError(f"bad fg_span {self.fg_span}")
        if self.field == "ramp":
            slope = (ds[1] - ds[0]) / max(self.width - 1, 1)
            if slope >= 1.0:
                raise ValueError("ramp slope must stay below 1 (no fold-over)")
        return self


def _texture_canvas(rng: np.random.Generator, h: int, w: int, c: int, kind: str) -> np.ndarray:
    """Texture field in [0, 1], float64, (h, w, c)."""
    if kind == "random-dot":
        # binary dots at 50% density, box-blurred so half-resolution matching
        # stays locally unambiguous
        dots = (rng.uniform(size=(h, w, c)) < 0.5).astype(np.float64)
        return ndimage.uniform_filter(dots, size=(3, 3, 1), mode="nearest")
    step = 8
    gh, gw = h // step + 2, w // step + 2
    grid = rng.uniform(size=(gh, gw, c))
    ys = np.arange(h) / step
    xs = np.arange(w) / step
    cy, cx = np.meshgrid(ys, xs, indexing="ij")
    out = np.empty((h, w, c))
    for ch in range(c):
        out[:, :, ch] = ndimage.map_coordinates(grid[:, :, ch], [cy, cx],
                                                order=1, mode="nearest")
    return out


def _sample_columns(canvas: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Linearly interpolate canvas rows at fractional columns xs (one x per
    output column, shared across rows and channels)."""
    x0 = np.floor(xs).astype(np.int64)
    f = xs - x0
    lo = canvas[:, x0, :]
    hi = canvas[:, x0 + 1, :]
    return (1.0 - f)[None, :, None] * lo + f[None, :, None] * hi


def gen_synthetic_pair(spec: SynthSpec) -> StereoSample:
    """Render a rectified pair with exact left-referenced ground truth.

    Each surface gets its own texture canvas wider than the image, so every
    right-image pixel resolves to a real texture sample (no border
    clamping). Fractional disparities use linear interpolation along x.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    H, W, C = spec.height, spec.width, spec.channels
    ds = spec.d_range
    if spec.field == "ramp":
        # what the right image samples is the disparity at the matching left
        # pixel, which for a positive slope exceeds the edge values
        slope = (float(ds[1]) - float(ds[0])) / (W - 1)
        top = max(float(ds[0]), float(ds[1])) / (1.0 - slope) if slope > 0 \
            else max(float(ds[0]), float(ds[1]))
    elif spec.field == "two-plane":
        top = float(ds[1])
    else:
        top = float(ds[0])
    pad = int(math.ceil(top)) + 2
    bg = _texture_canvas(rng, H, W + pad, C, spec.texture)
    xr = np.arange(W, dtype=np.float64)

    if spec.field == "constant":
        d = float(ds[0])
        left = bg[:, :W]
        gt_row = np.full(W, d)
        right = _sample_columns(bg, xr + d)
        valid_row = xr - gt_row >= -1e-9
    elif spec.field == "ramp":
        d0, d1 = float(ds[0]), float(ds[1])
        slope = (d1 - d0) / (W - 1)
        left = bg[:, :W]
        gt_row = d0 + slope * xr
        d_vis = (d0 + slope * xr) / (1.0 - slope)
        right = _sample_columns(bg, xr + d_vis)
        valid_row = xr - gt_row >= -1e-9
    else:
        dbg, dfg = float(ds[0]), float(ds[1])
        fg = _texture_canvas(rng, H, W + pad, C, spec.texture)
        fx0 = int(round(spec.fg_span[0] * W))
        fx1 = int(round(spec.fg_span[1] * W))
        left = bg[:, :W].copy()
        left[:, fx0:fx1] = fg[:, fx0:fx1]
        gt_row = np.full(W, dbg)
        gt_row[fx0:fx1] = dfg
        # visibility in the right image: the foreground strip projects to
        # [fx0 - dfg, fx1 - dfg)
        in_fg_right = (xr >= fx0 - dfg) & (xr < fx1 - dfg)
        right = np.where(in_fg_right[None, :, None],
                         _sample_columns(fg, xr + dfg),
                         _sample_columns(bg, xr + dbg))
        valid_row = xr - gt_row >= -1e-9
        if spec.occlusion_exclude:
            is_bg = np.ones(W, dtype=bool)
            is_bg[fx0:fx1] = False
            proj = xr - dbg
            occluded = is_bg & (proj >= fx0 - dfg) & (proj < fx1 - dfg)
            valid_row = valid_row & ~occluded

    dt = spec.dtype
    sample = StereoSample(
        left=np.ascontiguousarray(left, dtype=dt),
        right=np.ascontiguousarray(right, dtype=dt),
        gt=np.broadcast_to(gt_row, (H, W)).astype(dt),
        mask=np.broadcast_to(valid_row, (H, W)).copy(),
    )
    return sample.validate()


# -- PFM ----------------------------------------------------------------------


class PfmError(ValueError):
    pass


def _next_token(blob: bytes, pos: int, what: str) -> Tuple[bytes, int]:
    n = len(blob)
    while pos < n and blob[pos:pos + 1].isspace():
        pos += 1
    if pos >= n:
        raise PfmError(f"missing {what} at byte offset {pos}")
    start = pos
    while pos < n and not blob[pos:pos + 1].isspace():
        pos += 1
    return blob[start:pos], pos


def read_pfm(path: str) -> Tuple[np.ndarray, float]:
    """Decode a PFM file to a top-down float32 array plus its scale.

    Returns (H, W) for grayscale "Pf" and (H, W, 3) for color "PF". The
    scale's sign picks the payload endianness (negative = little-endian);
    its magnitude is returned as-is.
    """
    with open(path, "rb") as f:
        blob = f.read()
    magic, pos = _next_token(blob, 0, "format magic")
    if magic not in (b"Pf", b"PF"):
        raise PfmError(f"bad magic {magic!r} at byte offset 0; expected 'Pf' or 'PF'")
    channels = 1 if magic == b"Pf" else 3
    wtok, pos = _next_token(blob, pos, "width")
    htok, pos = _next_token(blob, pos, "height")
    stok, pos = _next_token(blob, pos, "scale")
    try:
        w, h = int(wtok), int(htok)
        scale = float(stok)
    except ValueError as e:
        raise PfmError(f"malformed header near byte offset {pos}: {e}") from None
    if w < 1 or h < 1:
        raise PfmError(f"bad dimensions {w}x{h}")
    if scale == 0.0:
        raise PfmError("scale 0 encodes no endianness")
    pos += 1  # single whitespace byte separates header from payload
    expected = w * h * channels * 4
    payload = blob[pos:]
    if len(payload) < expected:
        raise PfmError(
            f"truncated payload at byte offset {pos}: expected {expected} bytes, "
            f"found {len(payload)}")
    if len(payload) > expected:
        raise PfmError(f"{len(payload) - expected} trailing bytes after payload")
    dt = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(payload, dtype=dt).reshape(h, w, channels)
    data = np.flipud(data).astype("<f4")  # stored bottom-up
    if channels == 1:
        data = data.reshape(h, w)
    return np.ascontiguousarray(data), scale


def write_pfm(path: str, data: np.ndarray, scale: float = -1.0) -> None:
    """Encode a top-down float32 array as PFM (bottom-up scanlines). The
    sign of scale selects payload endianness. Write-then-read is bit-exact."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise PfmError(f"need (H, W), (H, W, 1) or (H, W, 3), got {np.asarray(data).shape}")
    if scale == 0.0:
        raise PfmError("scale 0 encodes no endianness")
    magic = b"Pf" if arr.shape[2] == 1 else b"PF"
    header = magic + b"\n" + f"{arr.shape[1]} {arr.shape[0]}\n".encode() \
        + f"{repr(float(scale))}\n".encode()
    dt = "<f4" if scale < 0 else ">f4"
    payload = np.flipud(arr).astype(dt).tobytes()
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(header + payload)
    os.replace(tmp, path)


# -- portable pixmaps ---------------------------------------------------------


class PnmError(ValueError):
    pass


def _pnm_header_tokens(blob: bytes, count: int) -> Tuple[List[int], int]:
    """Read `count` integer tokens after the magic, skipping # comments."""
    pos = 2
    out: List[int] = []
    n = len(blob)
    while len(out) < count:
        while pos < n and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < n and blob[pos:pos + 1] == b"#":
            while pos < n and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < n and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PnmError(f"truncated header at byte offset {pos}")
        try:
            out.append(int(blob[start:pos]))
        except ValueError:
            raise PnmError(f"bad header token {blob[start:pos]!r} at offset {start}") from None
    return out, pos


def read_image(path: str) -> np.ndarray:
    """Load a PGM/PPM raster as (H, W, C) float32 scaled to [0, 1].

    Supports P2/P5 grayscale and P3/P6 RGB at 8 or 16 bits (16-bit binary
    samples are big-endian). Anything else is rejected.
    """
    with open(path, "rb") as f:
        blob = f.read()
    magic = blob[:2]
    kinds = {b"P2": (1, False), b"P3": (3, False), b"P5": (1, True), b"P6": (3, True)}
    if magic not in kinds:
        raise PnmError(f"unsupported raster magic {magic!r} (need P2, P3, P5 or P6)")
    channels, binary = kinds[magic]
    (w, h, maxval), pos = _pnm_header_tokens(blob, 3)
    if w < 1 or h < 1:
        raise PnmError(f"bad dimensions {w}x{h}")
    if not 1 <= maxval <= 65535:
        raise PnmError(f"unsupported sample depth maxval={maxval}")
    count = w * h * channels
    if binary:
        pos += 1  # single whitespace after maxval
        wide = maxval > 255
        need = count * (2 if wide else 1)
        payload = blob[pos:pos + need]
        if len(payload) < need:
            raise PnmError(f"truncated pixel data: expected {need} bytes, found {len(payload)}")
        data = np.frombuffer(payload, dtype=">u2" if wide else "u1").astype(np.float32)
    else:
        try:
            values = blob[pos:].split()
            data = np.array([int(v) for v in values], dtype=np.float32)
        except ValueError as e:
            raise PnmError(f"bad ascii sample: {e}") from None
        if data.size != count:
            raise PnmError(f"expected {count} samples, found {data.size}")
    data /= np.float32(maxval)
    return data.reshape(h, w, channels)


def write_image(path: str, img: np.ndarray, maxval: int = 255) -> None:
    """Store (H, W), (H, W, 1) or (H, W, 3) values in [0, 1] as binary
    PGM/PPM with the given sample depth."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise PnmError(f"need (H, W[, 1|3]) image, got {np.asarray(img).shape}")
    if not 1 <= maxval <= 65535:
        raise PnmError(f"unsupported maxval {maxval}")
    q = np.clip(np.rint(arr * maxval), 0, maxval)
    magic = b"P5" if arr.shape[2] == 1 else b"P6"
    header = magic + f"\n{arr.shape[1]} {arr.shape[0]}\n{maxval}\n".encode()
    payload = q.astype(">u2" if maxval > 255 else "u1").tobytes()
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(header + payload)
    os.replace(tmp, path)


_HEAT_STOPS = np.array([0.0, 0.33, 0.66, 1.0])
_HEAT_RGB = np.array([
    [0.05, 0.05, 0.35],
    [0.00, 0.60, 0.85],
    [0.30, 0.85, 0.20],
    [0.95, 0.90, 0.10],
])


def colormap_rgb(values: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] to a blue-to-yellow heat ramp, (H, W, 3)."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    out = np.empty(v.shape + (3,))
    for ch in range(3):
        out[..., ch] = np.interp(v, _HEAT_STOPS, _HEAT_RGB[:, ch])
    return out


# -- masks and manifests ------------------------------------------------------


MASK_POLICIES = ("nonfinite", "nonpositive")


@dataclass
class MaskReport:
    mask: np.ndarray
    valid_count: int

    @property
    def usable(self) -> bool:
        return self.valid_count > 0


def sparse_mask_from_gt(gt: np.ndarray, policy: str = "nonfinite") -> MaskReport:
    """Validity mask from a ground-truth map under a sentinel policy:
    'nonfinite' drops NaN/inf pixels; 'nonpositive' additionally drops
    values <= 0 (LIDAR-style maps that use 0 for unlabeled)."""
    if policy not in MASK_POLICIES:
        raise ValueError(f"policy {policy!r} not in {MASK_POLICIES}")
    gt = np.asarray(gt)
    mask = np.isfinite(gt)
    if policy == "nonpositive":
        mask = mask & (gt > 0)
    return MaskReport(mask=mask, valid_count=int(mask.sum()))


@dataclass
class ManifestEntry:
    left: str
    right: str
    gt: str


def write_manifest(path: str, entries: Sequence[ManifestEntry]) -> None:
    lines = [f"{e.left}\t{e.right}\t{e.gt}\n" for e in entries]
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.writelines(lines)
    os.replace(tmp, path)


def read_manifest(path: str) -> List[ManifestEntry]:
    """Parse tab-separated {left, right, gt} records; relative paths resolve
    against the manifest's directory."""
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{ln}: expected 3 tab-separated paths, got {len(parts)}")
            entries.append(ManifestEntry(*(
                p if os.path.isabs(p) else os.path.join(base, p) for p in parts)))
    if not entries:
        raise ValueError(f"{path}: empty manifest")
    return entries


def load_sample(entry: ManifestEntry, mask_policy: str = "nonfinite") -> StereoSample:
    left = read_image(entry.left)
    right = read_image(entry.right)
    gt, _ = read_pfm(entry.gt)
    if gt.ndim != 2:
        raise ValueError(f"{entry.gt}: ground truth must be single-channel")
    report = sparse_mask_from_gt(gt, mask_policy)
    sample = StereoSample(left=left, right=right,
                          gt=np.where(report.mask, gt, 0.0).astype(np.float32),
                          mask=report.mask)
    return sample.validate()


def save_sample_files(out_dir: str, stem: str, sample: StereoSample) -> ManifestEntry:
    """Write one sample as 16-bit rasters plus a PFM ground truth whose
    invalid pixels hold NaN (recoverable via the nonfinite mask policy)."""
    os.makedirs(out_dir, exist_ok=True)
    lp = os.path.join(out_dir, f"{stem}_left.pgm" if sample.left.shape[2] == 1
                      else f"{stem}_left.ppm")
    rp = os.path.join(out_dir, f"{stem}_right.pgm" if sample.right.shape[2] == 1
                      else f"{stem}_right.ppm")
    gp = os.path.join(out_dir, f"{stem}_gt.pfm")
    write_image(lp, sample.left, maxval=65535)
    write_image(rp, sample.right, maxval=65535)
    gt = np.where(sample.mask, sample.gt, np.nan).astype(np.float32)
    write_pfm(gp, gt)
    return ManifestEntry(left=lp, right=rp, gt=gp)

"""Occlusion sensitivity probe.

Slides a gray square over both input images (the right copy shifted left
by the probed point's predicted disparity, rounded to a whole pixel, so
both eyes lose the same scene patch), re-runs inference per position, and
records how much the disparity at the probed point moves. Contributions
accumulate over each occluder's left-image footprint and the map is
normalized to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .model import ModelParams
from .train import predict


@dataclass
class SaliencyResult:
    heat: np.ndarray          # (H, W), max-normalized to [0, 1]
    point_disparity: float    # unperturbed prediction at the probed point
    shift: int                # right-image patch offset actually used


def _clip_span(start: int, length: int, bound: int) -> Tuple[int, int]:
    return max(start, 0), min(start + length, bound)


def occlude_once(params: ModelParams, left: np.ndarray, right: np.ndarray,
                 point: Tuple[int, int], top: int, lead: int, patch: int,
                 shift: int, baseline: float,
                 in_range: Tuple[float, float] = (0.0, 1.0),
                 fill: float = 0.5) -> float:
    """|disparity change at point| for one occluder anchored at (top, lead)
    in the left image. An occluder that misses both images entirely cannot
    change the input and contributes exactly zero (no forward pass runs)."""
    H, W = left.shape[:2]
    y0, y1 = _clip_span(top, patch, H)
    xl0, xl1 = _clip_span(lead, patch, W)
    xr0, xr1 = _clip_span(lead - shift, patch, W)
    left_hit = y1 > y0 and xl1 > xl0
    right_hit = y1 > y0 and xr1 > xr0
    if not (left_hit or right_hit):
        return 0.0
    lo = left
    ro = right
    if left_hit:
        lo = left.copy()
        lo[y0:y1, xl0:xl1] = fill
    if right_hit:
        ro = right.copy()
        ro[y0:y1, xr0:xr1] = fill
    pred = predict(params, lo, ro, in_range)
    return abs(float(pred[point[0], point[1]]) - baseline)


def occlusion_saliency(params: ModelParams, left: np.ndarray, right: np.ndarray,
                       point: Tuple[int, int], patch: int = 16, stride: int = 8,
                       in_range: Tuple[float, float] = (0.0, 1.0),
                       fill: float = 0.5) -> SaliencyResult:
    """Sensitivity map for the disparity predicted at `point` (row, col).

    The occluder anchor walks a stride grid over the left image; the right
    image gets the same patch shifted left by the point's rounded baseline
    disparity, so corresponding scene content disappears from both views.
    Deterministic: same parameters, images, and grid give the same map.
    """
    left = np.asarray(left)
    right = np.asarray(right)
    if left.ndim != 3 or left.shape != right.shape:
        raise ValueError(f"need matching (H, W, C) images, got {left.shape} "
                         f"and {right.shape}")
    H, W = left.shape[:2]
    py, px = point
    if not (0 <= py < H and 0 <= px < W):
        raise ValueError(f"point {point} outside {H}x{W} image")
    if patch < 1 or stride < 1:
        raise ValueError(f"patch and stride must be positive, got {patch}, {stride}")

    base_map = predict(params, left, right, in_range)
    baseline = float(base_map[py, px])
    shift = int(round(baseline))

    heat = np.zeros((H, W), dtype=np.float64)
    for top in range(0, H, stride):
        for lead in range(0, W, stride):
            delta = occlude_once(params, left, right, (py, px), top, lead,
                                 patch, shift, baseline, in_range, fill)
            if delta > 0.0:
                y0, y1 = _clip_span(top, patch, H)
                x0, x1 = _clip_span(lead, patch, W)
                heat[y0:y1, x0:x1] += delta
    peak = heat.max()
    if peak > 0.0:
        heat /= peak
    return SaliencyResult(heat=heat, point_disparity=baseline, shift=shift)

"""Disparity error metrics over labeled pixels.

All statistics are computed only where the validity mask is true. The D1
variant counts a pixel as erroneous when the absolute error exceeds 3 px
AND 5% of the true disparity, matching the usual benchmark definition.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

DEFAULT_THRESHOLDS = (1.0, 3.0, 5.0)


@dataclass
class Metrics:
    mae: float
    rms: float
    bad: Dict[float, float]      # threshold -> fraction of labeled pixels
    valid_count: int
    d1: Optional[float] = None

    def format_table(self) -> str:
        rows = [
            ("labeled pixels", f"{self.valid_count}"),
            ("mean abs error", f"{self.mae:.4f}"),
            ("rms error", f"{self.rms:.4f}"),
        ]
        for t in sorted(self.bad):
            rows.append((f">{t:g} px", f"{self.bad[t] * 100:.2f}%"))
        if self.d1 is not None:
            rows.append(("d1-all", f"{self.d1 * 100:.2f}%"))
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{name:<{width}}  {value}" for name, value in rows)

    def format_pairs(self) -> str:
        parts = [f"validCount={self.valid_count}", f"mae={self.mae:.6f}",
                 f"rms={self.rms:.6f}"]
        parts += [f"bad{t:g}={self.bad[t]:.6f}" for t in sorted(self.bad)]
        if self.d1 is not None:
            parts.append(f"d1={self.d1:.6f}")
        return " ".join(parts)


def compute_metrics(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray,
                    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
                    d1: bool = False) -> Metrics:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not pred.shape == gt.shape == mask.shape:
        raise ValueError(
            f"shape mismatch: pred {pred.shape}, gt {gt.shape}, mask {mask.shape}")
    n = int(mask.sum())
    if n == 0:
        raise ValueError("no labeled pixels to evaluate")
    err = np.abs(pred[mask] - gt[mask])
    if not np.all(np.isfinite(err)):
        raise ValueError("non-finite error at labeled pixels")
    bad = {float(t): float(np.mean(err > t)) for t in thresholds}
    d1_rate = None
    if d1:
        d1_rate = float(np.mean((err > 3.0) & (err > 0.05 * np.abs(gt[mask]))))
    return Metrics(
        mae=float(err.mean()),
        rms=float(np.sqrt(np.mean(err ** 2))),
        bad=bad,
        valid_count=n,
        d1=d1_rate,
    )

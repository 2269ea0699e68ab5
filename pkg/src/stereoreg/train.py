"""Training loop: random crops, RMSProp updates, cadenced validation,
checkpointing, and a plain-text log.

`fit` mutates the passed parameters in place (weights through the
optimizer, batch-norm running buffers through training-mode forwards), so
runs that must be reproducible should each start from freshly initialized
or freshly loaded parameters.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import model as M
from .checkpoint import save_checkpoint
from .data import StereoSample
from .metrics import Metrics, compute_metrics
from .model import ModelParams
from .optim import NonFiniteGradient, RMSProp

LATEST_NAME = "latest.gcnp"
FINAL_NAME = "final.gcnp"
LOG_NAME = "train.log"


@dataclass
class TrainConfig:
    iters: int = 1000
    crop_height: Optional[int] = None   # None: the model config's height
    crop_width: Optional[int] = None
    batch_size: int = 1
    seed: int = 0
    lr: float = 1e-3
    decay: float = 0.9
    eps: float = 1e-8
    val_cadence: int = 250
    checkpoint_every: Optional[int] = None   # None: same as val_cadence
    stop_mae: Optional[float] = None
    stop_bad1: Optional[float] = None
    in_range: Tuple[float, float] = (0.0, 1.0)

    def validate(self) -> "TrainConfig":
        if self.iters < 0:
            raise ValueError(f"iters must be nonnegative, got {self.iters}")
        if self.batch_size != 1:
            raise ValueError(
                f"only batch_size=1 is supported, got {self.batch_size}")
        if self.val_cadence < 1:
            raise ValueError(f"val_cadence must be positive, got {self.val_cadence}")
        if self.checkpoint_every is not None and self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be positive")
        lo, hi = self.in_range
        if not hi > lo:
            raise ValueError(f"in_range must be increasing, got {self.in_range}")
        for name in ("lr", "decay", "eps"):
            v = getattr(self, name)
            if not v > 0:
                raise ValueError(f"{name} must be positive, got {v}")
        return self


def normalize_image(raw: np.ndarray, in_range: Tuple[float, float]) -> np.ndarray:
    """Affine map of [lo, hi] intensities onto [-1, 1]."""
    lo, hi = in_range
    if not hi > lo:
        raise ValueError(f"in_range must be increasing, got {in_range}")
    raw = np.asarray(raw)
    scale = raw.dtype.type(2.0 / (hi - lo))
    return (raw - raw.dtype.type(lo)) * scale - raw.dtype.type(1.0)


def sample_crop(sample: StereoSample, crop_h: int, crop_w: int,
                rng: np.random.Generator) -> StereoSample:
    """Aligned random window over both images, gt, and mask. The row offset
    is drawn before the column offset."""
    H, W = sample.gt.shape
    if crop_h > H or crop_w > W:
        raise ValueError(f"crop {crop_h}x{crop_w} exceeds sample extents {H}x{W}")
    top = int(rng.integers(0, H - crop_h + 1))
    left = int(rng.integers(0, W - crop_w + 1))
    sl = (slice(top, top + crop_h), slice(left, left + crop_w))
    return StereoSample(left=sample.left[sl], right=sample.right[sl],
                        gt=sample.gt[sl], mask=sample.mask[sl])


def predict(params: ModelParams, left_raw: np.ndarray, right_raw: np.ndarray,
            in_range: Tuple[float, float] = (0.0, 1.0)) -> np.ndarray:
    """Inference-mode disparity map from raw [lo, hi] images."""
    out = M.forward(normalize_image(left_raw, in_range),
                    normalize_image(right_raw, in_range),
                    params, training=False)
    return out.disparity.data


def evaluate(params: ModelParams, samples: Sequence[StereoSample],
             in_range: Tuple[float, float] = (0.0, 1.0)) -> Metrics:
    """Pixel-pooled metrics over a list of samples."""
    if not samples:
        raise ValueError("no samples to evaluate")
    preds, gts, masks = [], [], []
    for s in samples:
        preds.append(predict(params, s.left, s.right, in_range).ravel())
        gts.append(s.gt.ravel())
        masks.append(s.mask.ravel())
    return compute_metrics(np.concatenate(preds), np.concatenate(gts),
                           np.concatenate(masks))


def _loss_for(result: M.ForwardResult, crop: StereoSample, loss_kind: str):
    if loss_kind == "l1-regression":
        return M.l1_loss(result.disparity, crop.gt, crop.mask)
    kind = "hard" if loss_kind == "hard-classification" else "soft"
    loss, _ = M.classification_loss(result.costs, crop.gt, crop.mask, kind)
    return loss


@dataclass
class LogEntry:
    step: int
    loss: float
    val_mae: Optional[float] = None
    val_bad1: Optional[float] = None

    def format(self) -> str:
        line = f"step={self.step} loss={self.loss:.6f}"
        if self.val_mae is not None:
            line += f" valMAE={self.val_mae:.6f} val>1px={self.val_bad1:.6f}"
        return line


@dataclass
class TrainResult:
    params: ModelParams
    log: List[LogEntry] = field(default_factory=list)
    halted: bool = False
    stopped_early: bool = False
    final_path: Optional[str] = None
    latest_path: Optional[str] = None


def fit(params: ModelParams, dataset: Sequence[StereoSample],
        train_config: TrainConfig, out_dir: Optional[str] = None,
        val_set: Optional[Sequence[StereoSample]] = None) -> TrainResult:
    """Run the optimization loop.

    Per step: draw a sample index, draw an aligned crop, one training-mode
    forward, loss per the model config's loss_kind, backward, one RMSProp
    update. Every val_cadence steps the validation set (when given) is
    scored and the latest checkpoint rewritten; early-stop thresholds are
    only consulted at those points. A non-finite loss or gradient halts the
    run, keeping the last written checkpoint and skipping the final one.
    """
    tc = train_config.validate()
    config = params.config
    if not dataset:
        raise ValueError("empty training dataset")
    ch = tc.crop_height if tc.crop_height is not None else config.height
    cw = tc.crop_width if tc.crop_width is not None else config.width
    d = config.divisor
    if ch % d or cw % d:
        raise ValueError(f"crop extents {ch}x{cw} not divisible by {d}")
    if config.dmax > cw:
        raise ValueError(f"dmax {config.dmax} exceeds crop width {cw}")

    rng = np.random.default_rng(tc.seed)
    opt = RMSProp(lr=tc.lr, decay=tc.decay, eps=tc.eps)
    named = params.named()
    result = TrainResult(params=params)
    ckpt_every = tc.checkpoint_every if tc.checkpoint_every is not None else tc.val_cadence

    log_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        result.latest_path = os.path.join(out_dir, LATEST_NAME)
        save_checkpoint(result.latest_path, params)
        log_fh = open(os.path.join(out_dir, LOG_NAME), "w", encoding="utf-8")

    def emit(entry: LogEntry) -> None:
        result.log.append(entry)
        if log_fh is not None:
            log_fh.write(entry.format() + "\n")
            log_fh.flush()

    try:
        for step in range(1, tc.iters + 1):
            idx = int(rng.integers(len(dataset)))
            crop = sample_crop(dataset[idx], ch, cw, rng)
            left = normalize_image(crop.left, tc.in_range)
            right = normalize_image(crop.right, tc.in_range)
            out = M.forward(left, right, params, training=True)
            loss = _loss_for(out, crop, config.loss_kind)
            loss_val = float(loss.item())
            if not np.isfinite(loss_val):
                emit(LogEntry(step=step, loss=loss_val))
                result.halted = True
                break
            params.zero_grad()
            loss.backward()
            try:
                opt.step(named)
            except NonFiniteGradient:
                emit(LogEntry(step=step, loss=loss_val))
                result.halted = True
                break

            entry = LogEntry(step=step, loss=loss_val)
            at_cadence = step % tc.val_cadence == 0
            if at_cadence and val_set:
                m = evaluate(params, val_set, tc.in_range)
                entry.val_mae = m.mae
                entry.val_bad1 = m.bad[1.0]
            emit(entry)
            if out_dir is not None and step % ckpt_every == 0:
                save_checkpoint(result.latest_path, params)
            if entry.val_mae is not None and (tc.stop_mae is not None
                                              or tc.stop_bad1 is not None):
                ok_mae = tc.stop_mae is None or entry.val_mae < tc.stop_mae
                ok_bad = tc.stop_bad1 is None or entry.val_bad1 < tc.stop_bad1
                if ok_mae and ok_bad:
                    result.stopped_early = True
                    break
    finally:
        if log_fh is not None:
            log_fh.close()

    if not result.halted and out_dir is not None:
        save_checkpoint(result.latest_path, params)
        result.final_path = os.path.join(out_dir, FINAL_NAME)
        save_checkpoint(result.final_path, params)
    return result

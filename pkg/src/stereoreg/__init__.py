"""End-to-end stereo disparity regression on a from-scratch autodiff core.

The pieces: `tensor` (reverse-mode automatic differentiation over numpy
arrays), `ops` (conv2d/conv3d, transposed conv, batch norm, softmax,
trilinear upsampling, cost volume), `model` (the feature towers, 3-D
regularizer variants, soft argmin, losses), `optim` (RMSProp), `train`
(crop/normalize/fit loop), `data` (synthetic pairs, PFM and PGM/PPM I/O,
manifests), `metrics`, `saliency`, `gradcheck`, `checkpoint`, and `cli`.
"""

from .tensor import Tensor, as_tensor
from .ops import ConvSpec, conv2d, conv3d, conv3d_transposed, batch_norm, relu
from .model import (ModelConfig, ModelParams, forward, init_params,
                    soft_argmin, l1_loss, classification_loss,
                    audit_rows, parameter_count)
from .checkpoint import save_checkpoint, load_checkpoint
from .optim import RMSProp
from .data import (StereoSample, SynthSpec, gen_synthetic_pair,
                   read_pfm, write_pfm, read_image, write_image,
                   sparse_mask_from_gt, read_manifest, write_manifest)
from .metrics import Metrics, compute_metrics
from .train import TrainConfig, TrainResult, fit, predict, evaluate, normalize_image
from .saliency import occlusion_saliency
from .gradcheck import grad_check, run_op_checks

__version__ = "0.1.0"

__all__ = [
    "Tensor", "as_tensor", "ConvSpec", "conv2d", "conv3d", "conv3d_transposed",
    "batch_norm", "relu", "ModelConfig", "ModelParams", "forward", "init_params",
    "soft_argmin", "l1_loss", "classification_loss", "audit_rows",
    "parameter_count", "save_checkpoint", "load_checkpoint", "RMSProp",
    "StereoSample", "SynthSpec", "gen_synthetic_pair", "read_pfm", "write_pfm",
    "read_image", "write_image", "sparse_mask_from_gt", "read_manifest",
    "write_manifest", "Metrics", "compute_metrics", "TrainConfig", "TrainResult",
    "fit", "predict", "evaluate", "normalize_image", "occlusion_saliency",
    "grad_check", "run_op_checks",
]

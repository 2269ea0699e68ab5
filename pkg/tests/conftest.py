import os

import numpy as np
import pytest

import stereoreg as sr
from stereoreg import data as D
from stereoreg import train as T


@pytest.fixture(scope="session")
def tiny_sample():
    """One small random-dot pair with integer constant disparity."""
    spec = D.SynthSpec(height=32, width=64, texture="random-dot",
                       field="constant", d_range=(3.0,), seed=7, dmax=8)
    return D.gen_synthetic_pair(spec)


@pytest.fixture(scope="session")
def trained_tiny(tiny_sample, tmp_path_factory):
    """A small single-scale model overfit to tiny_sample, plus the paths of
    its checkpoint and the sample's files on disk. Shared by the saliency
    and command-line tests so the model is only trained once."""
    out = tmp_path_factory.mktemp("trained_tiny")
    cfg = sr.ModelConfig(f=4, dmax=8, height=32, width=64,
                         variant="single-scale", loss_kind="l1-regression")
    params = sr.init_params(cfg, seed=0)
    tc = sr.TrainConfig(iters=120, seed=0, val_cadence=40, stop_mae=0.35)
    result = T.fit(params, [tiny_sample], tc, out_dir=str(out),
                   val_set=[tiny_sample])
    assert not result.halted
    entry = D.save_sample_files(str(out), "pair", tiny_sample)
    return {
        "params": params,
        "sample": tiny_sample,
        "config": cfg,
        "dir": str(out),
        "checkpoint": result.final_path,
        "left": entry.left,
        "right": entry.right,
        "gt": entry.gt,
    }

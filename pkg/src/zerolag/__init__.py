"""Convolution-only video frame extrapolation with recurrent, timestep-conditioned
and per-horizon prediction, plus FLOPs accounting and a latency-compensation simulator."""

__version__ = "0.1.0"

from .blocks import BlockKind, build_block, count_flops, run_block
from .latsim import JitterTrace, select_timestep, simulate
from .metrics import MsSsimParams, flops_report, ms_ssim, psnr
from .model import FlowOutput, Model, ModelConfig, forward, init_model
from .modelfile import load_model, save_model
from .predict import FramePair, ModelSet, predict, synthesize
from .train import TrainConfig, train

__all__ = [
    "BlockKind", "build_block", "count_flops", "run_block",
    "JitterTrace", "select_timestep", "simulate",
    "MsSsimParams", "flops_report", "ms_ssim", "psnr",
    "FlowOutput", "Model", "ModelConfig", "forward", "init_model",
    "load_model", "save_model",
    "FramePair", "ModelSet", "predict", "synthesize",
    "TrainConfig", "train",
]

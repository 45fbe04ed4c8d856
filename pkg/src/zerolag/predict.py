"""Frame synthesis from network outputs and the three multi-step prediction strategies."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import FlowOutput
from .tensor import ShapeError


@dataclass(frozen=True)
class FramePair:
    """The two newest frames: ``prev`` is I(t-1), ``curr`` is I(t)."""

    prev: np.ndarray
    curr: np.ndarray

    def __post_init__(self):
        if self.prev.shape != self.curr.shape:
            raise ShapeError(f"frame shapes differ: {self.prev.shape} vs {self.curr.shape}")
        if self.prev.ndim != 3 or self.prev.shape[0] != 3:
            raise ShapeError(f"frames must be (3, H, W), got {self.prev.shape}")


class ModelSet:
    """One single-horizon model per timestep; ``models[k - 1]`` predicts ``t + k``."""

    def __init__(self, models):
        self.models = list(models)
        if not self.models:
            raise ValueError("a model set needs at least one model")
        for m in self.models:
            if m.config.embed_timestep:
                raise ValueError("independent models must not embed the timestep")

    def __len__(self):
        return len(self.models)

    def __getitem__(self, k: int):
        if not 1 <= k <= len(self.models):
            raise IndexError(f"k={k} outside the valid range 1..{len(self.models)}")
        model = self.models[k - 1]
        if model is None:
            raise LookupError(f"no model for timestep {k}")
        return model


def backward_warp(frame: np.ndarray, flow: np.ndarray) -> np.ndarray:
    if frame.ndim != 3 or frame.shape[0] != 3:
        raise ShapeError(f"frame must be (3, H, W), got {frame.shape}")
    return np.clip(T.bilinear_sample(frame, flow), 0.0, 1.0)


def blend(warp_t: np.ndarray, warp_tm1: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if np.any(mask < 0) or np.any(mask > 1):
        raise ValueError("mask values must lie in [0, 1]")
    return T.blend(warp_t, warp_tm1, mask)


def synthesize(out: FlowOutput, pair: FramePair, *, tape: dict | None = None) -> np.ndarray:
    """Blend of the two backward-warped frames plus the residual, clamped to [0, 1]."""
    for name in ("flow_to_t", "flow_to_tm1", "mask", "residual"):
        if getattr(out, name).shape[1:] != pair.curr.shape[1:]:
            raise ShapeError(f"{name} spatial size {getattr(out, name).shape[1:]} "
                             f"!= frame size {pair.curr.shape[1:]}")
    w_t = backward_warp(pair.curr, out.flow_to_t)
    w_tm1 = backward_warp(pair.prev, out.flow_to_tm1)
    raw = blend(w_t, w_tm1, out.mask) + out.residual
    if tape is not None:
        tape.update(w_t=w_t, w_tm1=w_tm1, raw=raw)
    return np.clip(raw, 0.0, 1.0)


def synthesize_grad(out: FlowOutput, pair: FramePair, tape: dict, upstream: np.ndarray) -> FlowOutput:
    """Gradients of :func:`synthesize` w.r.t. every :class:`FlowOutput` field."""
    raw, w_t, w_tm1 = tape["raw"], tape["w_t"], tape["w_tm1"]
    g = upstream * ((raw >= 0) & (raw <= 1))
    g_mask = (g * (w_t - w_tm1)).sum(axis=0, keepdims=True)
    g_wt = g * out.mask
    g_wtm1 = g * (1 - out.mask)
    # warped values of [0, 1] frames stay in range, so the post-warp clamp is an identity
    _, g_ft = T.bilinear_sample_grad(pair.curr, out.flow_to_t, g_wt, need_input_grad=False)
    _, g_ftm1 = T.bilinear_sample_grad(pair.prev, out.flow_to_tm1, g_wtm1, need_input_grad=False)
    return FlowOutput(g_ft, g_ftm1, g_mask, g)


def _step(model, pair: FramePair, k=None) -> np.ndarray:
    return synthesize(model.forward(pair.prev, pair.curr, k), pair)


def predict_recurrent(model, pair: FramePair, k: int) -> np.ndarray:
    """Apply the one-step model ``k`` times, feeding predictions back as inputs."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if model.config.embed_timestep:
        raise ValueError("recurrent prediction needs a model without timestep embedding")
    for _ in range(k):
        nxt = _step(model, pair)
        pair = FramePair(pair.curr, nxt)
    return pair.curr


def predict_arbitrary(model, pair: FramePair, k: int) -> np.ndarray:
    """One pass of a timestep-embedding model conditioned on ``k``."""
    if not model.config.embed_timestep:
        raise ValueError("arbitrary prediction needs a timestep-embedding model")
    if not 1 <= k <= model.config.k_max:
        raise ValueError(f"k={k} outside the valid range 1..{model.config.k_max}")
    return _step(model, pair, k)


def predict_independent(models: ModelSet, pair: FramePair, k: int) -> np.ndarray:
    """Dispatch to the model trained for horizon ``k``."""
    if not 1 <= k <= len(models):
        raise ValueError(f"k={k} outside the valid range 1..{len(models)}")
    return _step(models[k], pair)


STRATEGIES = {
    "recurrent": predict_recurrent,
    "arbitrary": predict_arbitrary,
    "independent": predict_independent,
}


def predict(predictor, pair: FramePair, k: int, method: str) -> np.ndarray:
    try:
        fn = STRATEGIES[method]
    except KeyError:
        raise ValueError(f"unknown method {method!r}; expected one of {sorted(STRATEGIES)}") from None
    return fn(predictor, pair, k)

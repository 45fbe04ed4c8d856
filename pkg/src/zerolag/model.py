"""Coarse-to-fine flow network for two-frame extrapolation.

A shared strided encoder turns each input frame into an ``L``-level feature
pyramid. Decoding starts at the coarsest level: every level concatenates the two
frames' features (finer levels first backward-warp them with the current flow
estimate), the upsampled state from the level below and, for timestep-embedding
models, a constant ``k / k_max`` plane. An entry conv, one residual block and an
8-channel head produce a state update:

    channels 0-1  flow to the newest frame   (pixels, at this level's scale)
    channels 2-3  flow to the older frame
    channel  4    blend-mask logit
    channels 5-7  residual pre-activation

Flows double when the state is upsampled to the next finer level. Heads are
zero-initialised, so an untrained network emits zero flow, mask 0.5 and zero
residual.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from . import tensor as T
from .blocks import BlockKind, build_block, count_flops, run_block, run_block_grad
from .tensor import ConvSpec, ShapeError

STATE_CHANNELS = 8
PRELU_INIT = 0.25


@dataclass(frozen=True)
class ModelConfig:
    levels: int = 3
    channels: tuple[int, ...] = (24, 36, 54)
    blocks: tuple[str, ...] | str = "ifrnet_residual"
    embed_timestep: bool = False
    k_max: int = 5

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        blocks = (self.blocks,) * self.levels if isinstance(self.blocks, str) else tuple(self.blocks)
        object.__setattr__(self, "blocks", tuple(BlockKind(b).value for b in blocks))
        if self.levels < 2:
            raise ValueError(f"need at least 2 pyramid levels, got {self.levels}")
        if len(self.channels) != self.levels or len(self.blocks) != self.levels:
            raise ValueError("channels and blocks need one entry per pyramid level")
        if any(c < 6 or c % 6 for c in self.channels):
            raise ValueError(f"channel counts must be multiples of 6, got {self.channels}")
        if self.k_max < 1:
            raise ValueError(f"k_max must be >= 1, got {self.k_max}")

    @classmethod
    def fast(cls, **kw):
        """The lightweight variant: double-stacked split blocks in every decoder level."""
        levels = kw.get("levels", 3)
        return cls(blocks=("elan_lite_x2",) * levels, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["blocks"] = list(self.blocks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    # graph description ---------------------------------------------------

    def encoder_spec(self, level: int) -> ConvSpec:
        if level == 0:
            return ConvSpec(3, 3, self.channels[0], stride=1)
        return ConvSpec(3, self.channels[level - 1], self.channels[level], stride=2)

    def entry_spec(self, level: int) -> ConvSpec:
        c = self.channels[level]
        cin = 2 * c + (STATE_CHANNELS if level < self.levels - 1 else 0) + int(self.embed_timestep)
        return ConvSpec(3, cin, c)

    def head_spec(self, level: int) -> ConvSpec:
        return ConvSpec(3, self.channels[level], STATE_CHANNELS)

    def block_graph(self, level: int):
        return build_block(self.blocks[level], self.channels[level])


def weight_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered weight manifest: name -> shape."""
    shapes: dict[str, tuple[int, ...]] = {}
    for l in range(config.levels):
        spec = config.encoder_spec(l)
        shapes[f"enc.{l}.w"] = spec.weight_shape
        shapes[f"enc.{l}.b"] = (spec.cout,)
        shapes[f"enc.{l}.a"] = (spec.cout,)
    for l in reversed(range(config.levels)):
        spec = config.entry_spec(l)
        shapes[f"dec.{l}.in.w"] = spec.weight_shape
        shapes[f"dec.{l}.in.b"] = (spec.cout,)
        shapes[f"dec.{l}.in.a"] = (spec.cout,)
        for name, shape in config.block_graph(l).weight_shapes().items():
            shapes[f"dec.{l}.blk.{name}"] = shape
        spec = config.head_spec(l)
        shapes[f"dec.{l}.head.w"] = spec.weight_shape
        shapes[f"dec.{l}.head.b"] = (spec.cout,)
    return shapes


@dataclass
class Model:
    config: ModelConfig
    weights: dict[str, np.ndarray] = field(repr=False)

    def forward(self, prev, curr, k=None) -> "FlowOutput":
        return forward(self, prev, curr, k)

    @property
    def dtype(self):
        return next(iter(self.weights.values())).dtype


@dataclass
class FlowOutput:
    flow_to_t: np.ndarray
    flow_to_tm1: np.ndarray
    mask: np.ndarray
    residual: np.ndarray


def init_model(config: ModelConfig, seed: int, dtype=np.float32) -> Model:
    """He-normal conv weights from ``seed``; zero biases; zero output heads."""
    if not isinstance(config, ModelConfig):
        raise TypeError("config must be a ModelConfig")
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in weight_shapes(config).items():
        if name.endswith(".a"):
            w = np.full(shape, PRELU_INIT)
        elif name.endswith(".b") or ".head." in name:
            w = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            w = rng.standard_normal(shape) * np.sqrt(2.0 / ((1 + PRELU_INIT ** 2) * fan_in))
        weights[name] = w.astype(dtype)
    return Model(config, weights)


# --- forward / backward --------------------------------------------------------

def _check_inputs(config: ModelConfig, prev, curr, k):
    for name, f in (("frame_prev", prev), ("frame_curr", curr)):
        if f.ndim != 3 or f.shape[0] != 3:
            raise ShapeError(f"{name}: expected (3, H, W), got {f.shape}")
    if prev.shape != curr.shape:
        raise ShapeError(f"frame shapes differ: {prev.shape} vs {curr.shape}")
    step = 2 ** (config.levels - 1)
    h, w = prev.shape[1:]
    if h % step or w % step:
        raise ShapeError(f"frame size {h}x{w} not divisible by {step} ({config.levels} pyramid levels)")
    if config.embed_timestep:
        if k is None:
            raise ValueError("this model embeds the timestep; k is required")
        if not 1 <= k <= config.k_max:
            raise ValueError(f"k={k} outside the valid range 1..{config.k_max}")
    elif k is not None:
        raise ValueError("k supplied to a model without timestep embedding")


def _conv_act(x, spec, weights, key, cache):
    y, cols = T.conv2d(x, spec, weights[f"{key}.w"], weights[f"{key}.b"], return_cols=True)
    cache[key] = (x, cols, y)
    return T.prelu(y, weights[f"{key}.a"])


def _conv_act_grad(spec, weights, key, cache, g, grads, need_input_grad=True):
    x, cols, y = cache[key]
    g, grads[f"{key}.a"] = T.prelu_grad(y, weights[f"{key}.a"], g)
    gx, grads[f"{key}.w"], grads[f"{key}.b"] = T.conv2d_grad(
        x, spec, weights[f"{key}.w"], g, cols, need_input_grad=need_input_grad)
    return gx


def _encode(config, weights, frame, cache, tag):
    feats = []
    x = frame
    for l in range(config.levels):
        x = _conv_act(x, config.encoder_spec(l), weights, f"enc.{l}", cache.setdefault(tag, {}))
        feats.append(x)
    return feats


def _upsample_state(state):
    up = T.resize_bilinear(state, 2)
    up[:4] *= 2
    return up


def forward_with_tape(model: Model, prev: np.ndarray, curr: np.ndarray, k=None):
    """Run the network, returning ``(FlowOutput, tape)`` for :func:`backward`."""
    config, weights = model.config, model.weights
    _check_inputs(config, prev, curr, k)
    tape: dict = {"k": k, "levels": {}}
    fp = _encode(config, weights, prev, tape, "enc_prev")
    fc = _encode(config, weights, curr, tape, "enc_curr")
    state = None
    for l in reversed(range(config.levels)):
        rec: dict = {}
        parts = []
        if state is None:
            parts += [fp[l], fc[l]]
        else:
            up = _upsample_state(state)
            rec["up"] = up
            parts += [T.bilinear_sample(fp[l], up[2:4]), T.bilinear_sample(fc[l], up[0:2]), up]
        if config.embed_timestep:
            parts.append(np.full((1,) + fp[l].shape[1:], k / config.k_max, dtype=fp[l].dtype))
        inp = np.concatenate(parts, axis=0)
        h = _conv_act(inp, config.entry_spec(l), weights, f"dec.{l}.in", rec)
        btape: dict = {}
        h = run_block(config.block_graph(l), h, weights, f"dec.{l}.blk.", tape=btape)
        rec["block"] = btape
        d, cols = T.conv2d(h, config.head_spec(l), weights[f"dec.{l}.head.w"],
                           weights[f"dec.{l}.head.b"], return_cols=True)
        rec["head"] = (h, cols)
        state = d if state is None else rec["up"] + d
        tape["levels"][l] = rec
    tape["feats"] = (fp, fc)
    mask = T.sigmoid(state[4:5])
    residual = np.tanh(state[5:8])
    tape["mask"], tape["residual"] = mask, residual
    out = FlowOutput(state[0:2].copy(), state[2:4].copy(), mask, residual)
    return out, tape


def forward(model: Model, frame_prev: np.ndarray, frame_curr: np.ndarray, k=None) -> FlowOutput:
    return forward_with_tape(model, frame_prev, frame_curr, k)[0]


def backward(model: Model, tape: dict, grad_out: FlowOutput) -> dict[str, np.ndarray]:
    """Weight gradients given gradients w.r.t. each :class:`FlowOutput` field."""
    config, weights = model.config, model.weights
    grads: dict[str, np.ndarray] = {}
    mask, residual = tape["mask"], tape["residual"]
    g_state = np.concatenate([
        grad_out.flow_to_t, grad_out.flow_to_tm1,
        grad_out.mask * mask * (1 - mask),
        grad_out.residual * (1 - residual * residual),
    ]).astype(mask.dtype, copy=False)
    fp, fc = tape["feats"]
    g_fp = [None] * config.levels
    g_fc = [None] * config.levels

    for l in range(config.levels):
        rec = tape["levels"][l]
        h, cols = rec["head"]
        gh, grads[f"dec.{l}.head.w"], grads[f"dec.{l}.head.b"] = T.conv2d_grad(
            h, config.head_spec(l), weights[f"dec.{l}.head.w"], g_state, cols)
        gh, gblk = run_block_grad(config.block_graph(l), rec["block"], weights, gh, f"dec.{l}.blk.")
        grads.update(gblk)
        g_inp = _conv_act_grad(config.entry_spec(l), weights, f"dec.{l}.in", rec, gh, grads)
        c = config.channels[l]
        if l == config.levels - 1:
            g_fp[l], g_fc[l] = g_inp[:c], g_inp[c:2 * c]
            continue
        up = rec["up"]
        g_up = g_state + g_inp[2 * c:2 * c + STATE_CHANNELS]
        g_fp[l], g_flow = T.bilinear_sample_grad(fp[l], up[2:4], g_inp[:c])
        g_up[2:4] += g_flow
        g_fc[l], g_flow = T.bilinear_sample_grad(fc[l], up[0:2], g_inp[c:2 * c])
        g_up[0:2] += g_flow
        g_up[:4] *= 2
        g_state = T.resize_bilinear_grad(g_up, 2, (STATE_CHANNELS,) + tuple(s // 2 for s in up.shape[1:]))

    for tag, g_feats in (("enc_prev", g_fp), ("enc_curr", g_fc)):
        cache = tape[tag]
        g = g_feats[config.levels - 1]
        for l in reversed(range(config.levels)):
            local: dict = {}
            gx = _conv_act_grad(config.encoder_spec(l), weights, f"enc.{l}", cache, g, local,
                                need_input_grad=l > 0)
            for key, val in local.items():
                grads[key] = grads[key] + val if key in grads else val
            if l > 0:
                g = g_feats[l - 1] + gx
    return grads


# --- cost accounting -----------------------------------------------------------

def model_flops(config: ModelConfig, h: int, w: int) -> Fraction:
    """Exact conv MACs of one forward pass on an ``h x w`` frame pair."""
    total = Fraction(0)
    hh, ww = h, w
    for l in range(config.levels):
        spec = config.encoder_spec(l)
        hh, ww = spec.out_size(hh, ww)
        total += 2 * spec.flops(hh, ww)
    for l in range(config.levels):
        lh, lw = h >> l, w >> l
        total += config.entry_spec(l).flops(lh, lw)
        total += count_flops(config.block_graph(l), config.channels[l], lh, lw)
        total += config.head_spec(l).flops(lh, lw)
    return total

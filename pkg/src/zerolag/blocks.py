"""Residual-block graphs with execution, hand-chained gradients and static FLOPs counts.

Four block kinds are provided. Conv MACs per block, for ``c`` channels on an
``h x w`` map:

=================  ===============
ifrnet_residual    27 c^2 h w
elan_original      42 c^2 h w
elan_lite          25/3 c^2 h w
elan_lite_x2       50/3 c^2 h w
=================  ===============

Activations, splits, concats and additions are not counted.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .tensor import ConvSpec, ShapeError, conv2d, conv2d_grad, prelu, prelu_grad


class BlockKind(str, enum.Enum):
    IFRNET_RESIDUAL = "ifrnet_residual"
    ELAN_ORIGINAL = "elan_original"
    ELAN_LITE = "elan_lite"
    ELAN_LITE_X2 = "elan_lite_x2"


class MissingWeightError(KeyError):
    pass


# Per-kind FLOPs as a multiple of c^2 h w.
FLOPS_CONSTANT = {
    BlockKind.IFRNET_RESIDUAL: Fraction(27),
    BlockKind.ELAN_ORIGINAL: Fraction(42),
    BlockKind.ELAN_LITE: Fraction(25, 3),
    BlockKind.ELAN_LITE_X2: Fraction(50, 3),
}


@dataclass(frozen=True)
class Node:
    """One graph node. ``split`` nodes expose their outputs as ``name/0``, ``name/1``, ..."""

    name: str
    op: str
    inputs: tuple[str, ...]
    conv: ConvSpec | None = None
    parts: tuple[int, ...] = ()

    def __post_init__(self):
        if self.op not in ("conv", "split", "concat", "add", "act"):
            raise ValueError(f"unknown node op {self.op!r}")


@dataclass(frozen=True)
class BlockGraph:
    kind: str
    channels: int
    nodes: tuple[Node, ...]
    output: str
    input: str = "x"

    def conv_nodes(self):
        return [n for n in self.nodes if n.op == "conv"]

    def weight_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for n in self.nodes:
            if n.op == "conv":
                shapes[f"{n.name}.w"] = n.conv.weight_shape
                shapes[f"{n.name}.b"] = (n.conv.cout,)
            elif n.op == "act":
                shapes[f"{n.name}.a"] = (self._width(n.inputs[0]),)
        return shapes

    def _width(self, ref: str) -> int:
        return _channel_widths(self)[ref]


def _channel_widths(graph: BlockGraph) -> dict[str, int]:
    widths = {graph.input: graph.channels}
    for n in graph.nodes:
        missing = [i for i in n.inputs if i not in widths]
        if missing:
            raise ValueError(f"node {n.name!r} consumes undefined value(s) {missing}")
        ins = [widths[i] for i in n.inputs]
        if n.op == "conv":
            if ins[0] != n.conv.cin:
                raise ValueError(f"conv {n.name!r}: in-channels {n.conv.cin} but wired to {ins[0]}")
            widths[n.name] = n.conv.cout
        elif n.op == "split":
            if sum(n.parts) != ins[0]:
                raise ValueError(f"split {n.name!r}: parts {n.parts} do not tile {ins[0]}")
            for i, p in enumerate(n.parts):
                widths[f"{n.name}/{i}"] = p
        elif n.op == "concat":
            widths[n.name] = sum(ins)
        elif n.op == "add":
            if ins[0] != ins[1]:
                raise ValueError(f"add {n.name!r}: operand widths {ins} differ")
            widths[n.name] = ins[0]
        else:
            widths[n.name] = ins[0]
    return widths


def validate(graph: BlockGraph) -> None:
    widths = _channel_widths(graph)
    if graph.output not in widths:
        raise ValueError(f"output {graph.output!r} is not produced by any node")
    if widths[graph.output] != graph.channels:
        raise ValueError("residual block must preserve the channel count")


# --- canonical constructors -------------------------------------------------

def _conv(name, src, k, cin, cout):
    return Node(name, "conv", (src,), conv=ConvSpec(k, cin, cout))


def _act(name, src):
    return Node(name, "act", (src,))


def _ifrnet_residual(c: int):
    return [
        _conv("conv1", "x", 3, c, c), _act("act1", "conv1"),
        _conv("conv2", "act1", 3, c, c), _act("act2", "conv2"),
        _conv("conv3", "act2", 3, c, c),
        Node("out", "add", ("x", "conv3")),
    ]


def _elan_original(c: int):
    # two point-wise branches, a chain of four 3x3 convs, four taps aggregated by a 1x1 conv
    return [
        _conv("cv1", "x", 1, c, c), _act("act1", "cv1"),
        _conv("cv2", "x", 1, c, c), _act("act2", "cv2"),
        _conv("cv3", "act2", 3, c, c), _act("act3", "cv3"),
        _conv("cv4", "act3", 3, c, c), _act("act4", "cv4"),
        _conv("cv5", "act4", 3, c, c), _act("act5", "cv5"),
        _conv("cv6", "act5", 3, c, c), _act("act6", "cv6"),
        Node("cat", "concat", ("act1", "act2", "act4", "act6")),
        _conv("fuse", "cat", 1, 4 * c, c),
        Node("out", "add", ("x", "fuse")),
    ]


def _elan_lite(c: int, src: str = "x", p: str = ""):
    # split c -> (c/3 passthrough, 2c/3 processed); six thin 3x3 convs (2 + 5 units
    # of c^2 hw); taps after every second conv plus the passthrough (4c/3) fused by a
    # 1x1 conv (4/3 c^2 hw). Total 25/3 c^2 hw.
    t = c // 3
    nodes = [Node(f"{p}split", "split", (src,), parts=(t, 2 * t))]
    prev = f"{p}split/1"
    cin = 2 * t
    for i in range(1, 7):
        nodes += [_conv(f"{p}cv{i}", prev, 3, cin, t), _act(f"{p}act{i}", f"{p}cv{i}")]
        prev, cin = f"{p}act{i}", t
    nodes += [
        Node(f"{p}cat", "concat", (f"{p}split/0", f"{p}act2", f"{p}act4", f"{p}act6")),
        _conv(f"{p}fuse", f"{p}cat", 1, 4 * t, c),
        Node(f"{p}out", "add", (src, f"{p}fuse")),
    ]
    return nodes


def build_block(kind, c: int) -> BlockGraph:
    """Canonical graph for ``kind`` at ``c`` channels.

    The split-based kinds need ``c`` divisible by 6; the others take any ``c >= 1``.
    """
    kind = BlockKind(kind)
    if c < 1:
        raise ValueError(f"channel count must be positive, got {c}")
    if kind in (BlockKind.ELAN_LITE, BlockKind.ELAN_LITE_X2) and c % 6:
        raise ValueError(f"{kind.value} needs a channel count divisible by 6, got {c}")
    if kind is BlockKind.IFRNET_RESIDUAL:
        nodes, out = _ifrnet_residual(c), "out"
    elif kind is BlockKind.ELAN_ORIGINAL:
        nodes, out = _elan_original(c), "out"
    elif kind is BlockKind.ELAN_LITE:
        nodes, out = _elan_lite(c), "out"
    else:
        nodes = _elan_lite(c, "x", "a.") + _elan_lite(c, "a.out", "b.")
        out = "b.out"
    graph = BlockGraph(kind.value, c, tuple(nodes), out)
    validate(graph)
    assert count_flops(graph, c, 1, 1) == FLOPS_CONSTANT[kind] * c * c, kind
    return graph


def count_flops(graph: BlockGraph, c: int, h: int, w: int) -> Fraction:
    """Exact conv MAC count of one block application on a ``c x h x w`` input."""
    if graph.nodes and c != graph.channels:
        raise ShapeError(f"graph built for {graph.channels} channels, asked about {c}")
    total = Fraction(0)
    for n in graph.conv_nodes():
        ho, wo = n.conv.out_size(h, w)
        total += n.conv.flops(ho, wo)
    return total


# --- execution ---------------------------------------------------------------

def _get(weights, key):
    try:
        return weights[key]
    except KeyError:
        raise MissingWeightError(f"no weight {key!r} in weight map") from None


def run_block(graph: BlockGraph, x: np.ndarray, weights, prefix: str = "", *, tape: dict | None = None):
    """Execute the block on ``x``. Weight keys are ``prefix + node + '.w'/'.b'/'.a'``.

    If ``tape`` is a dict it is filled with what :func:`run_block_grad` needs.
    """
    if x.shape[0] != graph.channels:
        raise ShapeError(f"input channels: expected {graph.channels}, got {x.shape[0]}")
    vals = {graph.input: x}
    cols = {}
    for n in graph.nodes:
        if n.op == "conv":
            src = vals[n.inputs[0]]
            y, cols[n.name] = conv2d(src, n.conv, _get(weights, f"{prefix}{n.name}.w"),
                                     _get(weights, f"{prefix}{n.name}.b"), return_cols=True)
            vals[n.name] = y
        elif n.op == "act":
            vals[n.name] = prelu(vals[n.inputs[0]], _get(weights, f"{prefix}{n.name}.a"))
        elif n.op == "split":
            start = 0
            for i, p in enumerate(n.parts):
                vals[f"{n.name}/{i}"] = vals[n.inputs[0]][start:start + p]
                start += p
        elif n.op == "concat":
            vals[n.name] = np.concatenate([vals[i] for i in n.inputs], axis=0)
        else:
            vals[n.name] = vals[n.inputs[0]] + vals[n.inputs[1]]
    if tape is not None:
        tape["vals"] = vals
        tape["cols"] = cols
    return vals[graph.output]


def run_block_grad(graph: BlockGraph, tape: dict, weights, upstream: np.ndarray, prefix: str = ""):
    """Back-propagate ``upstream`` through a recorded block run.

    Returns ``(grad_input, grad_weights)``; ``grad_weights`` uses the same keys as
    the weight map.
    """
    vals, cols = tape["vals"], tape["cols"]
    grads: dict[str, np.ndarray] = {graph.output: upstream}
    gw = {}

    def acc(ref, g):
        if ref in grads:
            grads[ref] = grads[ref] + g
        else:
            grads[ref] = g

    for n in reversed(graph.nodes):
        if n.op == "split":
            parts = [grads.get(f"{n.name}/{i}") for i in range(len(n.parts))]
            if all(p is None for p in parts):
                continue
            src = vals[n.inputs[0]]
            parts = [np.zeros((p,) + src.shape[1:], src.dtype) if g is None else g
                     for p, g in zip(n.parts, parts)]
            acc(n.inputs[0], np.concatenate(parts, axis=0))
            continue
        g = grads.pop(n.name, None)
        if g is None:
            continue
        if n.op == "conv":
            w = _get(weights, f"{prefix}{n.name}.w")
            gx, gw[f"{prefix}{n.name}.w"], gw[f"{prefix}{n.name}.b"] = conv2d_grad(
                vals[n.inputs[0]], n.conv, w, g, cols[n.name])
            acc(n.inputs[0], gx)
        elif n.op == "act":
            gx, gw[f"{prefix}{n.name}.a"] = prelu_grad(vals[n.inputs[0]],
                                                       _get(weights, f"{prefix}{n.name}.a"), g)
            acc(n.inputs[0], gx)
        elif n.op == "concat":
            start = 0
            for ref in n.inputs:
                width = vals[ref].shape[0]
                acc(ref, g[start:start + width])
                start += width
        else:
            acc(n.inputs[0], g)
            acc(n.inputs[1], g)
    gx = grads.get(graph.input)
    if gx is None:
        gx = np.zeros_like(vals[graph.input])
    return gx, gw

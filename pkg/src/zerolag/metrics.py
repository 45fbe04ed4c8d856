"""Image-quality metrics (MS-SSIM, PSNR) and per-strategy FLOPs reports."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .model import ModelConfig, model_flops
from .tensor import ShapeError

DEFAULT_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


@dataclass(frozen=True)
class MsSsimParams:
    """MS-SSIM settings for unit dynamic range.

    ``luminance`` selects where the luminance term enters: ``"all"`` multiplies the
    full SSIM of every scale (so two constant images score ``C1 / (1 + C1)``
    regardless of the scale count); ``"coarsest"`` is the classic formulation with
    contrast-structure terms only at the finer scales.
    """

    scales: int = 5
    weights: tuple[float, ...] = DEFAULT_WEIGHTS
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    luminance: str = "all"
    auto_reduce: bool = True

    def __post_init__(self):
        if self.scales < 1:
            raise ValueError("scales must be >= 1")
        if len(self.weights) < self.scales:
            raise ValueError(f"need {self.scales} weights, got {len(self.weights)}")
        if self.scales == len(self.weights) and abs(sum(self.weights) - 1) > 1e-3:
            raise ValueError("scale weights must sum to 1")
        if self.luminance not in ("all", "coarsest"):
            raise ValueError(f"luminance must be 'all' or 'coarsest', got {self.luminance!r}")

    @property
    def c1(self):
        return self.k1 ** 2

    @property
    def c2(self):
        return self.k2 ** 2

    def for_size(self, h: int, w: int) -> tuple[int, np.ndarray]:
        """Effective scale count and renormalised weights for an ``h x w`` image."""
        scales = self.scales
        while scales > 1 and min(h, w) < self.window * 2 ** (scales - 1):
            if not self.auto_reduce:
                raise ShapeError(f"{h}x{w} image too small for {self.scales} MS-SSIM scales")
            scales -= 1
        if min(h, w) < self.window:
            raise ShapeError(f"{h}x{w} image smaller than the {self.window}-pixel window")
        w_ = np.asarray(self.weights[:scales], dtype=np.float64)
        return scales, w_ / w_.sum()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = list(self.weights)
        d["channel_aggregation"] = "mean"
        return d


def _gauss(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable valid-mode Gaussian over the last two axes
    out = sliding_window_view(img, g.size, axis=-1) @ g
    return sliding_window_view(out, g.size, axis=-2) @ g


def _ssim_terms(a, b, g, c1, c2):
    mu_a, mu_b = _filter(a, g), _filter(b, g)
    saa = _filter(a * a, g) - mu_a ** 2
    sbb = _filter(b * b, g) - mu_b ** 2
    sab = _filter(a * b, g) - mu_a * mu_b
    lum = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    cs = (2 * sab + c2) / (saa + sbb + c2)
    return (lum * cs).mean(axis=(-2, -1)), cs.mean(axis=(-2, -1))


def _pool2(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[-2] // 2 * 2, x.shape[-1] // 2 * 2
    x = x[..., :h, :w]
    return 0.25 * (x[..., 0::2, 0::2] + x[..., 1::2, 0::2] + x[..., 0::2, 1::2] + x[..., 1::2, 1::2])


def ms_ssim(a: np.ndarray, b: np.ndarray, params: MsSsimParams = MsSsimParams()) -> float:
    """Multi-scale SSIM of two (C, H, W) images in [0, 1]; channels are averaged."""
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scales, weights = params.for_size(a.shape[-2], a.shape[-1])
    g = _gauss(params.window, params.sigma)
    per_channel = np.ones(a.shape[0])
    for s in range(scales):
        ssim, cs = _ssim_terms(a, b, g, params.c1, params.c2)
        last = s == scales - 1
        term = ssim if (last or params.luminance == "all") else cs
        per_channel *= np.maximum(term, 0.0) ** weights[s]
        if not last:
            a, b = _pool2(a), _pool2(b)
    return float(per_channel.mean())


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio for unit range; ``inf`` for identical images."""
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0:
        return math.inf
    return 10 * math.log10(1 / mse)


# --- cost reports -------------------------------------------------------------

def _as_config(model_or_set) -> ModelConfig:
    if isinstance(model_or_set, ModelConfig):
        return model_or_set
    if hasattr(model_or_set, "config"):
        return model_or_set.config
    return model_or_set.models[0].config


@dataclass
class FlopsReport:
    strategy: str
    resolution: tuple[int, int]
    per_inference: Fraction
    per_k: dict[int, Fraction] = field(default_factory=dict)

    def gflops(self, k: int) -> float:
        return float(self.per_k[k] / 10 ** 9)

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "resolution": list(self.resolution),
            "flop_convention": "1 multiply-accumulate = 1 FLOP; conv layers only",
            "per_inference_flops": str(self.per_inference),
            "per_k": [{"k": k, "flops": str(v), "gflops": float(v / 10 ** 9)}
                      for k, v in sorted(self.per_k.items())],
        }


def strategy_cost(per_inference, strategy: str, k: int):
    """Cost of predicting ``t + k``: recurrent pays ``k`` passes, the others one."""
    if strategy == "recurrent":
        return per_inference * k
    if strategy in ("arbitrary", "independent"):
        return per_inference
    raise ValueError(f"unknown strategy {strategy!r}")


def flops_report(model_or_set, resolution: tuple[int, int], strategy: str, k_range=range(1, 6)) -> FlopsReport:
    h, w = resolution
    per = model_flops(_as_config(model_or_set), h, w)
    rep = FlopsReport(strategy, (h, w), per)
    for k in k_range:
        rep.per_k[int(k)] = Fraction(strategy_cost(per, strategy, int(k)))
    return rep


def crossover_k(per_step_recurrent, per_call_single) -> int:
    """Smallest horizon at which a single-pass model is cheaper than a recurrent one."""
    a, b = Fraction(per_step_recurrent), Fraction(per_call_single)
    if b < a:
        return 1
    return math.floor(b / a) + 1

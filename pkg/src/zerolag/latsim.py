"""Receiver-side latency compensation simulator.

A sender emits frames at ``fps``; each frame reaches the receiver after the delay
given by a jitter trace. At every display tick ``t`` the receiver holds frames up
to ``t - d`` where ``d = ceil(delay * fps / 1000)``. Instead of showing the stale
frame ``I[t - d]`` it predicts ``k = min(d, k_max)`` steps ahead from the two
newest received frames and shows that. Both are scored against the true ``I[t]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .metrics import MsSsimParams, ms_ssim
from .predict import FramePair, ModelSet, predict


class TraceError(ValueError):
    pass


def frames_behind(delay_ms: float, fps: float) -> int:
    if delay_ms < 0:
        raise ValueError(f"delay must be >= 0, got {delay_ms}")
    if fps <= 0:
        raise ValueError(f"fps must be > 0, got {fps}")
    # round away float noise so e.g. 100 ms at 30 fps is exactly 3 frames
    return max(0, math.ceil(round(delay_ms * fps / 1000, 9)))


def select_timestep(delay_ms: float, fps: float, k_max: int) -> int:
    """Prediction horizon that covers ``delay_ms`` at ``fps``, clamped to ``[0, k_max]``."""
    return min(frames_behind(delay_ms, fps), k_max)


@dataclass(frozen=True)
class JitterTrace:
    """Per-frame one-way delays, either listed or generated.

    Generator kinds: ``constant`` (``ms``), ``uniform`` (``lo``, ``hi``, ``seed``) and
    ``spike`` (``base``, ``spike_ms``, ``period``): every ``period``-th frame is
    delayed by ``spike_ms`` instead of ``base``.
    """

    delays_ms: tuple[float, ...] | None = None
    generator: dict | None = None

    def __post_init__(self):
        if (self.delays_ms is None) == (self.generator is None):
            raise TraceError("a trace needs exactly one of delays_ms or generator")
        if self.delays_ms is not None:
            object.__setattr__(self, "delays_ms", tuple(float(d) for d in self.delays_ms))
            if any(d < 0 or not math.isfinite(d) for d in self.delays_ms):
                raise TraceError("delays must be finite and >= 0")
        else:
            kind = self.generator.get("kind")
            required = {"constant": ("ms",), "uniform": ("lo", "hi"), "spike": ("base", "spike_ms", "period")}
            if kind not in required:
                raise TraceError(f"unknown generator kind {kind!r}")
            missing = [k for k in required[kind] if k not in self.generator]
            if missing:
                raise TraceError(f"{kind} generator is missing {missing}")

    @classmethod
    def constant(cls, ms: float):
        return cls(generator={"kind": "constant", "ms": ms})

    @classmethod
    def uniform(cls, lo: float, hi: float, seed: int = 0):
        return cls(generator={"kind": "uniform", "lo": lo, "hi": hi, "seed": seed})

    @classmethod
    def spike(cls, base: float, spike_ms: float, period: int):
        return cls(generator={"kind": "spike", "base": base, "spike_ms": spike_ms, "period": period})

    def delays(self, n: int) -> np.ndarray:
        if self.delays_ms is not None:
            if len(self.delays_ms) < n:
                raise TraceError(f"trace has {len(self.delays_ms)} delays but the sequence has {n} frames")
            return np.asarray(self.delays_ms[:n])
        g = self.generator
        if g["kind"] == "constant":
            out = np.full(n, float(g["ms"]))
        elif g["kind"] == "uniform":
            if g["lo"] > g["hi"]:
                raise TraceError("uniform generator needs lo <= hi")
            out = np.random.default_rng(g.get("seed", 0)).uniform(g["lo"], g["hi"], size=n)
        else:
            period = int(g["period"])
            if period < 1:
                raise TraceError("spike period must be >= 1")
            out = np.full(n, float(g["base"]))
            out[period - 1::period] = float(g["spike_ms"])
        if np.any(out < 0):
            raise TraceError("generated delays must be >= 0")
        return out

    def to_dict(self) -> dict:
        if self.delays_ms is not None:
            return {"delays_ms": list(self.delays_ms)}
        return {"generator": dict(self.generator)}

    @classmethod
    def from_dict(cls, d: dict) -> "JitterTrace":
        if "delays_ms" in d:
            return cls(delays_ms=tuple(d["delays_ms"]))
        if "generator" in d:
            return cls(generator=dict(d["generator"]))
        raise TraceError("trace JSON needs a 'delays_ms' list or a 'generator' object")

    @classmethod
    def load(cls, path) -> "JitterTrace":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class SimRecord:
    tick: int
    delay_ms: float
    frames_behind: int
    k: int
    inputs: tuple[int, ...]
    ms_ssim_compensated: float
    ms_ssim_stale: float


@dataclass
class SimReport:
    records: list[SimRecord]
    skipped: list[dict]
    config: dict = field(default_factory=dict)

    @property
    def k_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for r in self.records:
            counts[r.k] = counts.get(r.k, 0) + 1
        return dict(sorted(counts.items()))

    def aggregates(self) -> dict:
        comp = [r.ms_ssim_compensated for r in self.records]
        stale = [r.ms_ssim_stale for r in self.records]
        if not comp:
            return {"displayed": 0, "skipped": len(self.skipped), "k_counts": {}}
        return {
            "displayed": len(comp),
            "skipped": len(self.skipped),
            "mean_ms_ssim_compensated": float(np.mean(comp)),
            "mean_ms_ssim_stale": float(np.mean(stale)),
            "min_ms_ssim_compensated": float(np.min(comp)),
            "min_ms_ssim_stale": float(np.min(stale)),
            "mean_gain": float(np.mean(comp) - np.mean(stale)),
            "k_counts": {str(k): v for k, v in self.k_counts.items()},
        }

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "aggregates": self.aggregates(),
            "records": [{**asdict(r), "inputs": list(r.inputs)} for r in self.records],
            "skipped": self.skipped,
        }


def _k_max(predictor, method: str) -> int:
    if method == "independent":
        return len(predictor) if isinstance(predictor, ModelSet) else predictor.config.k_max
    return predictor.config.k_max


def simulate(predictor, frames, trace: JitterTrace, fps: float, method: str,
             *, k_max: int | None = None, params: MsSsimParams = MsSsimParams()) -> SimReport:
    """Replay ``frames`` through the delayed channel and score compensated playback."""
    n = len(frames)
    if n < 3:
        raise ValueError(f"need at least 3 frames, got {n}")
    delays = trace.delays(n)
    k_max = _k_max(predictor, method) if k_max is None else k_max
    records, skipped = [], []
    for t in range(n):
        behind = frames_behind(float(delays[t]), fps)
        k = min(behind, k_max)
        newest = t - behind
        gt = frames[t]
        if k == 0:
            if newest < 0:
                skipped.append({"tick": t, "frames_behind": behind, "reason": "nothing received yet"})
                continue
            shown, inputs = frames[newest], (newest,)
        else:
            if newest - 1 < 0:
                skipped.append({"tick": t, "frames_behind": behind, "reason": "not enough history"})
                continue
            pair = FramePair(frames[newest - 1], frames[newest])
            shown, inputs = predict(predictor, pair, k, method), (newest - 1, newest)
        stale = frames[newest]
        records.append(SimRecord(t, float(delays[t]), behind, k, inputs,
                                 ms_ssim(shown, gt, params), ms_ssim(stale, gt, params)))
    config = {"fps": fps, "method": method, "k_max": k_max, "trace": trace.to_dict(),
              "frames": n, "ms_ssim": params.to_dict()}
    return SimReport(records, skipped, config)

"""Laplacian-pyramid L1 loss, Adam, and the recurrent / arbitrary / independent training drivers."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .model import Model, ModelConfig, backward, forward_with_tape, init_model
from .predict import FramePair, ModelSet, synthesize, synthesize_grad
from .tensor import NonFiniteError, ShapeError

log = logging.getLogger(__name__)

METHODS = ("recurrent", "arbitrary", "independent")


# --- Laplacian pyramid -----------------------------------------------------------

def _check_levels(img, levels):
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    step = 2 ** (levels - 1)
    if img.shape[1] % step or img.shape[2] % step:
        raise ShapeError(f"image size {img.shape[1:]} not divisible by {step} for {levels} levels")


def laplacian_pyramid(img: np.ndarray, levels: int) -> list[np.ndarray]:
    """Band-pass levels, finest first; the last entry is the coarsest Gaussian level."""
    _check_levels(img, levels)
    bands = []
    g = img
    for _ in range(levels - 1):
        down = T.resize_bilinear(g, 0.5)
        bands.append(g - T.resize_bilinear(down, 2))
        g = down
    bands.append(g)
    return bands


def reconstruct(bands) -> np.ndarray:
    img = bands[-1]
    for band in reversed(bands[:-1]):
        img = band + T.resize_bilinear(img, 2)
    return img


def lap_l1_loss(pred: np.ndarray, gt: np.ndarray, levels: int = 4):
    """Sum over pyramid levels of ``2**l * mean|band_l(pred) - band_l(gt)|``.

    Returns ``(loss, grad_pred)``.
    """
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} and gt {gt.shape} differ")
    bands = laplacian_pyramid(pred - gt, levels)  # the pyramid is linear
    loss = 0.0
    gbands = []
    for l, b in enumerate(bands):
        w = 2.0 ** l
        loss += w * float(np.abs(b).mean())
        gbands.append((w / b.size) * np.sign(b))
    g = gbands[-1]
    for l in reversed(range(levels - 1)):
        shape = bands[l].shape
        half = (shape[0], shape[1] // 2, shape[2] // 2)
        up_t = T.resize_bilinear_grad(gbands[l], 2, half)
        g = gbands[l] + T.resize_bilinear_grad(g - up_t, 0.5, shape)
    return loss, g.astype(pred.dtype, copy=False)


# --- optimiser ----------------------------------------------------------------------

@dataclass(frozen=True)
class AdamHyper:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(weights: dict, grads: dict, state: AdamState, hyper: AdamHyper = AdamHyper(), lr=None):
    """One bias-corrected Adam update; returns ``(new_weights, new_state)``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name!r} at step {state.step + 1}")
    lr = hyper.lr if lr is None else lr
    t = state.step + 1
    new_w, new_m, new_v = dict(weights), {}, {}
    for name, w in weights.items():
        g = grads.get(name)
        m = state.m.get(name, np.zeros_like(w))
        v = state.v.get(name, np.zeros_like(w))
        if g is None:
            g = np.zeros_like(w)
        m = hyper.beta1 * m + (1 - hyper.beta1) * g
        v = hyper.beta2 * v + (1 - hyper.beta2) * g * g
        m_hat = m / (1 - hyper.beta1 ** t)
        v_hat = v / (1 - hyper.beta2 ** t)
        new_w[name] = (w - lr * m_hat / (np.sqrt(v_hat) + hyper.eps)).astype(w.dtype, copy=False)
        if not np.isfinite(new_w[name]).all():
            raise NonFiniteError(f"update made {name!r} non-finite at step {t}")
        new_m[name], new_v[name] = m.astype(w.dtype, copy=False), v.astype(w.dtype, copy=False)
    return new_w, AdamState(t, new_m, new_v)


# --- training -------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    method: str = "recurrent"
    epochs: int = 8
    batch_size: int = 4
    lr: float = 3e-4
    lr_schedule: str = "cosine"
    k_max: int = 5
    loss_levels: int = 4
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    threads: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not (np.isfinite(self.lr) and self.lr > 0):
            raise ValueError(f"lr must be a positive finite number, got {self.lr}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if isinstance(self.model, dict):
            object.__setattr__(self, "model", ModelConfig.from_dict(self.model))
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def model_config(self) -> ModelConfig:
        return replace(self.model, embed_timestep=self.method == "arbitrary", k_max=self.k_max)


# epochs per regime at desk scale; the timestep-conditioned model shares its updates
# across k_max horizons and needs roughly three times as many to clear the k=1 baseline
DESK_SCALE_EPOCHS = {"recurrent": 6, "arbitrary": 18, "independent": 6}
DESK_SCALE_SEQUENCES = 32


def desk_scale_config(method: str, seed: int = 0) -> TrainConfig:
    """Settings used for the CPU-only trend checks: 64x64 synthetic scenes, three pyramid levels."""
    return TrainConfig(method=method, epochs=DESK_SCALE_EPOCHS[method], batch_size=2, lr=1e-3,
                       model=ModelConfig(levels=3, channels=(6, 12, 24)), seed=seed)


@dataclass
class TrainLog:
    method: str
    epoch_losses: list[float] = field(default_factory=list)
    k_counts: list[dict[int, int]] = field(default_factory=list)
    wall_time_s: float = 0.0
    per_model: list["TrainLog"] = field(default_factory=list)

    def to_dict(self, timing: bool = False) -> dict:
        # wall time is opt-in so that reports stay byte-identical between runs
        d = {"method": self.method, "epoch_losses": self.epoch_losses}
        if timing:
            d["wall_time_s"] = self.wall_time_s
        if self.k_counts:
            d["k_counts"] = [{str(k): v for k, v in c.items()} for c in self.k_counts]
        if self.per_model:
            d["per_model"] = [m.to_dict(timing) for m in self.per_model]
        return d


def anchors(dataset, horizon: int) -> list[tuple[int, int]]:
    """``(sequence, t)`` pairs with frames t-1, t and t+horizon available."""
    out = []
    for s, seq in enumerate(dataset):
        for t in range(1, len(seq) - horizon):
            out.append((s, t))
    return out


def sample_loss_and_grads(model: Model, prev, curr, target, k, levels: int):
    out, tape = forward_with_tape(model, prev, curr, k)
    pair = FramePair(prev, curr)
    stape: dict = {}
    pred = synthesize(out, pair, tape=stape)
    loss, g_pred = lap_l1_loss(pred, target, levels)
    g_out = synthesize_grad(out, pair, stape, g_pred)
    return loss, backward(model, tape, g_out)


def _lr_at(config: TrainConfig, step: int, total: int) -> float:
    if config.lr_schedule == "constant":
        return config.lr
    # cosine from lr down to lr / 10
    frac = step / max(total, 1)
    return config.lr * (0.1 + 0.9 * 0.5 * (1 + np.cos(np.pi * frac)))


def _train_single(config: TrainConfig, dataset, horizon: int | None, embed: bool) -> tuple[Model, TrainLog]:
    """Train one model. ``horizon`` fixes the target offset; ``None`` samples k per example."""
    mcfg = replace(config.model, embed_timestep=embed, k_max=config.k_max)
    model = init_model(mcfg, config.seed)
    # arbitrary training draws every k from its own window pool, so small k is not starved
    # of the windows that only fit short horizons
    pools = {k: anchors(dataset, k) for k in (range(1, config.k_max + 1) if horizon is None else [horizon])}
    if not all(pools.values()):
        raise ValueError(f"sequences too short for horizon {max(pools)}")
    n_items = len(pools[min(pools)])
    if horizon is None and n_items < config.k_max:
        raise ValueError("need at least k_max training windows to stratify timesteps")
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    hyper = AdamHyper(lr=config.lr)
    n_batches = -(-n_items // config.batch_size)
    total_steps = n_batches * config.epochs
    tlog = TrainLog(config.method)
    start = time.perf_counter()
    pool = ThreadPoolExecutor(max_workers=config.threads) if config.threads > 1 else None
    try:
        for epoch in range(config.epochs):
            if horizon is None:
                ks = np.tile(np.arange(1, config.k_max + 1), -(-n_items // config.k_max))[:n_items]
                ks = rng.permutation(ks)
                tlog.k_counts.append({int(k): int((ks == k).sum()) for k in range(1, config.k_max + 1)})
                picks = {}
                for k, windows in pools.items():
                    need = int((ks == k).sum())
                    reps = -(-need // len(windows))
                    picks[k] = iter(np.concatenate([rng.permutation(len(windows)) for _ in range(reps)])[:need])
                epoch_items = [(*pools[int(k)][next(picks[int(k)])], int(k)) for k in ks]
            else:
                epoch_items = [(*pools[horizon][j], horizon) for j in rng.permutation(n_items)]
            losses = []
            for b in range(n_batches):
                jobs = []
                for s, t, k in epoch_items[b * config.batch_size:(b + 1) * config.batch_size]:
                    seq = dataset[s].frames
                    jobs.append((seq[t - 1], seq[t], seq[t + k], k if embed else None))

                def run(job):
                    return sample_loss_and_grads(model, *job, config.loss_levels)

                results = list(pool.map(run, jobs)) if pool else [run(j) for j in jobs]
                grads = {}
                for loss, g in results:
                    if not np.isfinite(loss):
                        raise NonFiniteError(f"non-finite loss at epoch {epoch + 1}")
                    losses.append(loss)
                    for name, val in g.items():
                        grads[name] = grads[name] + val if name in grads else val.copy()
                scale = 1.0 / len(results)
                grads = {n: v * np.asarray(scale, v.dtype) for n, v in grads.items()}
                lr = _lr_at(config, state.step, total_steps)
                model.weights, state = adam_step(model.weights, grads, state, hyper, lr=lr)
            tlog.epoch_losses.append(float(np.mean(losses)))
            log.info("%s h=%s epoch %d/%d loss %.5f", config.method, horizon, epoch + 1,
                     config.epochs, tlog.epoch_losses[-1])
    finally:
        if pool:
            pool.shutdown()
    tlog.wall_time_s = time.perf_counter() - start
    return model, tlog


def train(config: TrainConfig, dataset):
    """Train according to ``config.method``; returns ``(Model or ModelSet, TrainLog)``."""
    dataset = list(dataset)
    if config.method == "recurrent":
        return _train_single(config, dataset, 1, embed=False)
    if config.method == "arbitrary":
        short = [len(s) for s in dataset if len(s) < config.k_max + 2]
        if short:
            raise ValueError(f"arbitrary training needs sequences of length >= {config.k_max + 2}")
        return _train_single(config, dataset, None, embed=True)
    models, tlog = [], TrainLog("independent")
    for k in range(1, config.k_max + 1):
        m, sub = _train_single(config, dataset, k, embed=False)
        models.append(m)
        tlog.per_model.append(sub)
    tlog.epoch_losses = [float(np.mean(ls)) for ls in zip(*(s.epoch_losses for s in tlog.per_model))]
    tlog.wall_time_s = sum(s.wall_time_s for s in tlog.per_model)
    return ModelSet(models), tlog


def train_recurrent(config: TrainConfig, dataset):
    return train(replace(config, method="recurrent"), dataset)


def train_arbitrary(config: TrainConfig, dataset):
    return train(replace(config, method="arbitrary"), dataset)


def train_independent(config: TrainConfig, dataset):
    return train(replace(config, method="independent"), dataset)

"""Synthetic constant-velocity scenes with ground-truth flow, plus PNG sequence I/O."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSceneSpec:
    height: int = 64
    width: int = 64
    min_objects: int = 2
    max_objects: int = 5
    kinds: tuple[str, ...] = ("rectangle", "disk")
    min_size: float = 8.0
    max_size: float = 16.0
    max_speed: float = 4.0
    length: int = 12
    seed: int = 0
    # explicit per-object velocities (vx, vy); overrides the random draw
    velocities: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        if self.length < 7:
            raise ValueError(f"sequence length must be >= 7, got {self.length}")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if self.max_speed < 0 or self.max_speed > 4:
            raise ValueError(f"max_speed must lie in [0, 4], got {self.max_speed}")
        bad = set(self.kinds) - {"rectangle", "disk"}
        if bad or not self.kinds:
            raise ValueError(f"unknown object kinds {sorted(bad)}")
        if self.velocities is not None:
            object.__setattr__(self, "velocities", tuple(tuple(map(float, v)) for v in self.velocities))
            for vx, vy in self.velocities:
                if math.hypot(vx, vy) > 4:
                    raise ValueError(f"velocity ({vx}, {vy}) exceeds 4 px/frame")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kinds"] = list(self.kinds)
        if self.velocities is not None:
            d["velocities"] = [list(v) for v in self.velocities]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        d = dict(d)
        if "kinds" in d:
            d["kinds"] = tuple(d["kinds"])
        if d.get("velocities") is not None:
            d["velocities"] = tuple(tuple(v) for v in d["velocities"])
        return cls(**d)


@dataclass
class SceneObject:
    kind: str
    x: float          # centre at frame 0
    y: float
    size: float       # side length or diameter
    vx: float
    vy: float
    color: tuple[float, float, float]


@dataclass
class Sequence:
    """Frames ``(T, 3, H, W)`` in [0, 1]; ``flows[t]`` is the backward flow from frame t to t-1."""

    frames: np.ndarray
    flows: np.ndarray
    objects: list[SceneObject] = field(default_factory=list)
    seed: int = 0
    spec: SyntheticSceneSpec | None = None

    def __len__(self):
        return len(self.frames)


def _coverage(obj: SceneObject, t: int, h: int, w: int) -> np.ndarray:
    cx, cy = obj.x + obj.vx * t, obj.y + obj.vy * t
    xs = np.arange(w) + 0.5
    ys = np.arange(h) + 0.5
    r = obj.size / 2
    if obj.kind == "rectangle":
        # exact pixel/box overlap area
        ox = np.clip(np.minimum(xs + 0.5, cx + r) - np.maximum(xs - 0.5, cx - r), 0, 1)
        oy = np.clip(np.minimum(ys + 0.5, cy + r) - np.maximum(ys - 0.5, cy - r), 0, 1)
        return oy[:, None] * ox[None, :]
    d = np.hypot(xs[None, :] - cx, ys[:, None] - cy)
    return np.clip(r + 0.5 - d, 0, 1)


def _background(rng, h, w):
    base = rng.uniform(0.25, 0.6, size=3)
    gx, gy = rng.uniform(-0.2, 0.2, size=(2, 3))
    xs = np.linspace(-0.5, 0.5, w)
    ys = np.linspace(-0.5, 0.5, h)
    return base[:, None, None] + gx[:, None, None] * xs[None, None, :] + gy[:, None, None] * ys[None, :, None]


def _place(rng, spec: SyntheticSceneSpec, size: float, vx: float, vy: float):
    travel_x, travel_y = vx * (spec.length - 1), vy * (spec.length - 1)
    margin = 1.0
    lo_x = size / 2 + margin + max(0.0, -travel_x)
    hi_x = spec.width - size / 2 - margin - max(0.0, travel_x)
    lo_y = size / 2 + margin + max(0.0, -travel_y)
    hi_y = spec.height - size / 2 - margin - max(0.0, travel_y)
    if lo_x > hi_x or lo_y > hi_y:
        raise GenerationError(
            f"object of size {size:g} moving ({vx:g}, {vy:g}) px/frame cannot stay inside "
            f"{spec.width}x{spec.height} for {spec.length} frames")
    return rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)


def _random_velocity(rng, spec: SyntheticSceneSpec, size: float):
    # redraw until the object's travel fits in the canvas
    for _ in range(100):
        speed = spec.max_speed * np.sqrt(rng.uniform())
        ang = rng.uniform(0, 2 * np.pi)
        vx, vy = speed * np.cos(ang), speed * np.sin(ang)
        if (abs(vx) * (spec.length - 1) + size + 2 <= spec.width
                and abs(vy) * (spec.length - 1) + size + 2 <= spec.height):
            return float(vx), float(vy)
    raise GenerationError("could not draw a velocity that keeps the object in frame")


def render_sequence(objects: list[SceneObject], background: np.ndarray, length: int) -> tuple[np.ndarray, np.ndarray]:
    _, h, w = background.shape
    frames = np.empty((length, 3, h, w))
    flows = np.zeros((length, 2, h, w))
    for t in range(length):
        img = background.copy()
        owner = np.full((h, w), -1)
        for i, obj in enumerate(objects):
            cov = _coverage(obj, t, h, w)
            img = img * (1 - cov) + np.asarray(obj.color)[:, None, None] * cov
            owner[cov > 0.5] = i
        frames[t] = img
        if t > 0:
            for i, obj in enumerate(objects):
                sel = owner == i
                flows[t, 0][sel] = -obj.vx
                flows[t, 1][sel] = -obj.vy
    return np.clip(frames, 0, 1), flows


def generate_sequence(spec: SyntheticSceneSpec, seed: int) -> Sequence:
    rng = np.random.default_rng(seed)
    if spec.velocities is not None:
        n = len(spec.velocities)
    else:
        n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    background = _background(rng, spec.height, spec.width)
    objects = []
    for i in range(n):
        kind = spec.kinds[int(rng.integers(len(spec.kinds)))]
        size = float(rng.uniform(spec.min_size, spec.max_size))
        if spec.velocities is not None:
            vx, vy = spec.velocities[i]
        else:
            vx, vy = _random_velocity(rng, spec, size)
        x, y = _place(rng, spec, size, vx, vy)
        color = tuple(float(c) for c in rng.uniform(0.0, 1.0, size=3))
        objects.append(SceneObject(kind, x, y, size, vx, vy, color))
    frames, flows = render_sequence(objects, background, spec.length)
    return Sequence(frames.astype(np.float32), flows.astype(np.float32), objects, seed, spec)


def gen_synthetic_dataset(spec: SyntheticSceneSpec, count: int) -> list[Sequence]:
    """``count`` sequences; sequence ``i`` is drawn from seed ``(spec.seed, i)``."""
    if count < 1:
        raise ValueError("count must be positive")
    seeds = np.random.SeedSequence(spec.seed).spawn(count)
    return [generate_sequence(spec, int(s.generate_state(1)[0])) for s in seeds]


# --- disk format -------------------------------------------------------------

def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255), 0, 255).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img).transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr.transpose(2, 0, 1) / np.float32(255)


def frame_name(i: int) -> str:
    return f"frame_{i + 1:04d}.png"


def save_sequence(seq: Sequence, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(seq.frames):
        write_png(d / frame_name(i), f)
    meta = {
        "spec": seq.spec.to_dict() if seq.spec else None,
        "seed": seq.seed,
        "objects": [asdict(o) for o in seq.objects],
        "velocities": [[o.vx, o.vy] for o in seq.objects],
    }
    (d / "scene.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def save_dataset(sequences, directory) -> list[Path]:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, seq in enumerate(sequences):
        p = root / f"seq_{i:04d}"
        save_sequence(seq, p)
        paths.append(p)
    return paths


def read_frames(directory) -> np.ndarray:
    files = sorted(Path(directory).glob("frame_*.png"))
    if not files:
        raise FileNotFoundError(f"no frame_*.png files in {directory}")
    return np.stack([read_png(f) for f in files])


def load_sequence(directory) -> Sequence:
    """Frames from PNGs; flows are re-rendered from the sidecar's object list."""
    d = Path(directory)
    frames = read_frames(d)
    meta = json.loads((d / "scene.json").read_text())
    objects = [SceneObject(**{**o, "color": tuple(o["color"])}) for o in meta["objects"]]
    spec = SyntheticSceneSpec.from_dict(meta["spec"]) if meta.get("spec") else None
    flows = np.zeros((len(frames), 2) + frames.shape[2:], dtype=np.float32)
    if objects:
        _, flows64 = render_sequence(objects, np.zeros(frames.shape[1:]), len(frames))
        flows = flows64.astype(np.float32)
    return Sequence(frames, flows, objects, meta.get("seed", 0), spec)


def load_dataset(directory) -> list[Sequence]:
    dirs = sorted(p for p in Path(directory).iterdir() if p.is_dir() and (p / "scene.json").exists())
    if not dirs:
        raise FileNotFoundError(f"no sequence directories under {directory}")
    return [load_sequence(p) for p in dirs]

"""Seeded synthetic video clips with exact instance masks.

Each clip is a textured value-noise background with one to three
hard-edged moving shapes (discs, squares, triangles) drawn over it in
painter's order, so overlapping objects occlude lower-numbered ones.
Masks are exact: pixel value 0 is background, k is the k-th object.
Objects can leave the visible frame and come back; positions bounce
off an extended box around the frame so a departed object returns.

All sampling goes through one generator seeded per clip, making every
clip a pure function of its seed and geometry.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List

import numpy as np

BENCHMARK_SEED_OFFSET = 1_000_000

_PALETTE = (
    (0.92, 0.18, 0.18),
    (0.15, 0.82, 0.22),
    (0.20, 0.35, 0.95),
    (0.95, 0.88, 0.15),
    (0.88, 0.25, 0.90),
    (0.10, 0.88, 0.88),
)

CATEGORIES = ("single", "multi", "scale", "fast", "occlusion")


@dataclass
class Clip:
    """frames: [T, 3, H, W] in [0, 1]; masks: [T, H, W] object ids."""

    frames: np.ndarray
    masks: np.ndarray
    num_objects: int
    category: str
    seed: int

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class _Shape:
    kind: str                  # disc | square | triangle
    color: np.ndarray          # [3]
    start: np.ndarray          # [2] (y, x) at t=0
    velocity: np.ndarray       # [2] px/frame
    size0: float               # radius-like extent at t=0
    size_ratio: float          # size at t=T-1 relative to size0
    angle0: float = 0.0
    spin: float = 0.0
    vertex_jitter: np.ndarray = field(default_factory=lambda: np.ones(3))


def _value_noise(rng: np.random.Generator, h: int, w: int, cell: int) -> np.ndarray:
    """One octave of bilinear-interpolated lattice noise in [0, 1]."""
    gh, gw = h // cell + 2, w // cell + 2
    grid = rng.uniform(size=(gh, gw))
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0 = ys.astype(int)
    x0 = xs.astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = grid[np.ix_(y0, x0)]
    b = grid[np.ix_(y0, x0 + 1)]
    c = grid[np.ix_(y0 + 1, x0)]
    d = grid[np.ix_(y0 + 1, x0 + 1)]
    return (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx
            + c * fy * (1 - fx) + d * fy * fx)


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base = 0.6 * _value_noise(rng, h, w, cell=max(8, h // 4))
    base += 0.4 * _value_noise(rng, h, w, cell=max(4, h // 8))
    tint = rng.uniform(-0.08, 0.08, size=3)
    chans = 0.25 + 0.35 * base[None] + tint[:, None, None]
    return np.clip(chans, 0.0, 1.0)


def _bounce(pos: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Reflect coordinates into [lo, hi] (triangle-wave folding)."""
    span = hi - lo
    p = np.mod(pos - lo, 2.0 * span)
    p = np.where(p > span, 2.0 * span - p, p)
    return p + lo


def _raster(shape: _Shape, t: int, num_frames: int, h: int, w: int) -> np.ndarray:
    margin = shape.size0 * max(1.0, shape.size_ratio) + 4.0
    pos = shape.start + shape.velocity * t
    cy = float(_bounce(np.array([pos[0]]), -margin, h + margin)[0])
    cx = float(_bounce(np.array([pos[1]]), -margin, w + margin)[0])
    frac = t / max(1, num_frames - 1)
    size = shape.size0 * shape.size_ratio ** frac

    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    if shape.kind == "disc":
        return dy * dy + dx * dx <= size * size
    if shape.kind == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= size
    # triangle: three half-plane tests against jittered vertices
    ang = shape.angle0 + shape.spin * t
    verts = []
    for i in range(3):
        a = ang + i * 2.0 * np.pi / 3.0
        r = size * shape.vertex_jitter[i]
        verts.append((cy + r * np.sin(a), cx + r * np.cos(a)))
    inside = np.ones((h, w), dtype=bool)
    for i in range(3):
        y1, x1 = verts[i]
        y2, x2 = verts[(i + 1) % 3]
        cross = (x2 - x1) * (yy - y1) - (y2 - y1) * (xx - x1)
        inside &= cross >= 0.0
    return inside


def _sample_shapes(rng: np.random.Generator, category: str, num_frames: int,
                   h: int, w: int) -> List[_Shape]:
    if category == "single":
        count = 1
    elif category == "multi":
        count = int(rng.integers(2, 4))
    elif category == "scale":
        count = int(rng.integers(1, 3))
    elif category == "fast":
        count = int(rng.integers(1, 3))
    elif category == "occlusion":
        count = 2
    else:
        count = int(rng.integers(1, 4))

    colors = rng.permutation(len(_PALETTE))[:count]
    shapes: List[_Shape] = []
    kinds = ("disc", "square", "triangle")
    cross = np.array([h * 0.5, w * 0.5]) + rng.uniform(-4, 4, size=2)
    t_mid = (num_frames - 1) / 2.0

    for i in range(count):
        kind = kinds[int(rng.integers(0, 3))]
        color = np.clip(np.asarray(_PALETTE[colors[i]]) + rng.uniform(-0.05, 0.05, 3), 0, 1)
        size0 = float(rng.uniform(0.09, 0.16) * min(h, w))
        size_ratio = float(rng.uniform(0.85, 1.18))
        speed = rng.uniform(1.0, 2.5)
        if category == "fast":
            speed = rng.uniform(5.0, 9.0) * min(h, w) / 64.0
        if category == "scale":
            # linear ratio >= sqrt(2) in both directions gives >= 2x area change
            ratio = float(rng.uniform(1.45, 1.8))
            size_ratio = ratio if rng.uniform() < 0.5 else 1.0 / ratio
            size0 = float(rng.uniform(0.10, 0.14) * min(h, w))
            if size_ratio > 1.0:
                size0 = min(size0, 0.11 * min(h, w))
        theta = rng.uniform(0, 2 * np.pi)
        velocity = speed * np.array([np.sin(theta), np.cos(theta)])
        start = np.array([rng.uniform(0.25, 0.75) * h, rng.uniform(0.25, 0.75) * w])
        if category == "occlusion":
            # both paths pass through one crossing point at the clip midpoint
            speed = rng.uniform(2.0, 4.0)
            theta = rng.uniform(0, 2 * np.pi) if i == 0 else theta + np.pi + rng.uniform(-0.5, 0.5)
            velocity = speed * np.array([np.sin(theta), np.cos(theta)])
            start = cross - velocity * t_mid
        shapes.append(_Shape(
            kind=kind, color=color, start=start, velocity=velocity,
            size0=size0, size_ratio=size_ratio,
            angle0=rng.uniform(0, 2 * np.pi),
            spin=rng.uniform(-0.15, 0.15),
            vertex_jitter=rng.uniform(0.8, 1.2, size=3),
        ))
    return shapes


def generate_clip(seed: int, num_frames: int = 8, height: int = 64, width: int = 64,
                  category: str = "random") -> Clip:
    """Build one clip deterministically from (seed, geometry, category).

    Every object is visible in frame 0 (the reference frame); later
    frames may move it out of view. Resampling handles the rare draw
    where an object starts invisible or fully hidden.
    """
    rng = np.random.default_rng(seed)
    for _attempt in range(16):
        bg = _background(rng, height, width)
        shapes = _sample_shapes(rng, category, num_frames, height, width)
        frames = np.empty((num_frames, 3, height, width))
        masks = np.zeros((num_frames, height, width), dtype=np.uint8)
        for t in range(num_frames):
            img = bg.copy()
            for k, shape in enumerate(shapes, start=1):
                hit = _raster(shape, t, num_frames, height, width)
                img[:, hit] = shape.color[:, None]
                masks[t][hit] = k
            img += rng.normal(0.0, 0.01, size=img.shape)
            frames[t] = np.clip(img, 0.0, 1.0)
        first = masks[0]
        if all((first == k).sum() >= 12 for k in range(1, len(shapes) + 1)):
            return Clip(frames=frames, masks=masks, num_objects=len(shapes),
                        category=category, seed=seed)
    raise RuntimeError(f"could not draw a clip with all objects visible (seed {seed})")


def training_clip(seed: int, num_frames: int = 8, height: int = 64, width: int = 64) -> Clip:
    """Clip for one optimization step: category cycles with the seed."""
    cat = CATEGORIES[seed % len(CATEGORIES)]
    return generate_clip(seed, num_frames, height, width, category=cat)


def benchmark_suite(seed: int, num_frames: int = 8, height: int = 64,
                    width: int = 64) -> List[Clip]:
    """Fixed 24-clip evaluation set, disjoint from training seeds.

    Five clips each of single-object, multi-object, scale-drift and
    fast-motion plus four occlusion clips. Seeds live far above the
    training range so the two never collide.
    """
    counts = {"single": 5, "multi": 5, "scale": 5, "fast": 5, "occlusion": 4}
    clips: List[Clip] = []
    base = BENCHMARK_SEED_OFFSET + int(seed) * 1000
    i = 0
    for cat, n in counts.items():
        for _ in range(n):
            clips.append(generate_clip(base + i, num_frames, height, width, category=cat))
            i += 1
    return clips

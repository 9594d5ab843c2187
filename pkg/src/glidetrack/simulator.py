"""Synthetic gliding-assay sequences with ground truth.

Filaments are drawn as chains of joints at fixed spacing ("wagon trains") of
constant width. The head leads along a slowly turning heading and the body
follows its path. Length changes through a three-phase dynamic-instability
process (shrink / grow / pause) applied at the trailing end, so the leading end
moves at the glide speed. Filaments pop in and out as Poisson events, and the
emitted frames are the central crop of a larger canvas so that filaments also
enter and leave across the borders.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import ConfigError, load_toml, packaged
from .core import Frame, HeadPoint, ImageSequence, InstanceMask, LabelStack

SHRINK, GROW, PAUSE = 0, 1, 2
PHASE_NAMES = ("shrink", "grow", "pause")


@dataclass(frozen=True)
class GaussianMixture:
    """Mixture of 1-D Gaussians; draws are clamped into [lo, hi]."""

    modes: tuple[tuple[float, float, float], ...]
    lo: float = -math.inf
    hi: float = math.inf

    def __post_init__(self):
        modes = tuple((float(w), float(m), float(s)) for w, m, s in self.modes)
        object.__setattr__(self, "modes", modes)
        if not modes:
            raise ConfigError("mixture needs at least one mode")
        w = np.array([m[0] for m in modes])
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ConfigError(f"mixture weights must be positive and sum to 1, got {w.tolist()}")
        # zero std is allowed as a degenerate (constant) mode
        if any(m[2] < 0 for m in modes):
            raise ConfigError("mixture stds must be non-negative")
        if self.lo > self.hi:
            raise ConfigError("mixture support is empty")

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianMixture":
        return cls(tuple(tuple(m) for m in d["modes"]), float(d.get("lo", -math.inf)),
                   float(d.get("hi", math.inf)))

    @property
    def weights(self) -> np.ndarray:
        return np.array([m[0] for m in self.modes])

    def sample_mode(self, rng: np.random.Generator) -> tuple[int, float]:
        k = int(rng.choice(len(self.modes), p=self.weights))
        _, mean, std = self.modes[k]
        x = mean + std * rng.standard_normal() if std > 0 else mean
        return k, float(min(max(x, self.lo), self.hi))

    def cdf(self, x) -> np.ndarray:
        from scipy.stats import norm
        x = np.asarray(x, dtype=np.float64)
        out = np.zeros_like(x)
        for w, m, s in self.modes:
            out += w * (norm.cdf(x, m, s) if s > 0 else (x >= m).astype(float))
        out = np.where(x < self.lo, 0.0, out)
        return np.where(x >= self.hi, 1.0, out)


def sample(mix: GaussianMixture, rng: np.random.Generator) -> float:
    return mix.sample_mode(rng)[1]


@dataclass(frozen=True)
class SimConfig:
    canvas: tuple[int, int] = (320, 320)
    crop: tuple[int, int] = (256, 256)
    num_frames: int = 379
    warmup_frames: int = 12
    frame_rate: float = 16.0
    initial_count: int = 28
    max_count: int = 40
    mt_width: float = 3.0
    segment_spacing: float = 2.0
    length_dist: GaussianMixture = GaussianMixture(((1.0, 40.0, 10.0),), 8.0, 150.0)
    speed_dist: GaussianMixture = GaussianMixture(((1.0, 2.0, 0.4),), 0.3, 6.0)
    turn_rate_dist: GaussianMixture = GaussianMixture(((1.0, 0.0, 0.03),), -0.3, 0.3)
    instability_dist: GaussianMixture = GaussianMixture(
        ((0.25, 0.6, 0.15), (0.45, 0.3, 0.1), (0.30, 0.0, 0.0)), 0.0, 3.0)
    appear_rate: float = 0.25
    disappear_rate: float = 0.2
    phase_switch_prob: float = 0.05
    collision_prob: float = 0.5
    collision_turn_std: float = 0.6
    background: float = 0.08
    gain: tuple[float, float] = (0.35, 0.55)
    noise_std: float = 0.02
    tint: tuple[float, float, float] = (0.55, 1.0, 0.45)
    bleach_per_frame: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        (H, W), (h1, w1) = self.canvas, self.crop
        if not (0 < h1 < H and 0 < w1 < W):
            raise ConfigError("crop must lie strictly inside the canvas")
        if h1 < 16 or w1 < 16:
            raise ConfigError("crop must be at least 16x16")
        if self.num_frames <= self.warmup_frames:
            raise ConfigError("num_frames must exceed warmup_frames")
        if self.mt_width < 1:
            raise ConfigError("mt_width must be >= 1")
        if self.segment_spacing <= 0:
            raise ConfigError("segment_spacing must be positive")
        if len(self.instability_dist.modes) != 3:
            raise ConfigError("instability_dist needs exactly 3 modes (shrink, grow, pause)")
        if self.frame_rate <= 0:
            raise ConfigError("frame_rate must be positive")
        if min(self.appear_rate, self.disappear_rate, self.noise_std) < 0:
            raise ConfigError("rates and noise must be non-negative")
        if not 0 <= self.phase_switch_prob <= 1 or not 0 <= self.collision_prob <= 1:
            raise ConfigError("probabilities must lie in [0, 1]")

    @property
    def crop_origin(self) -> tuple[int, int]:
        """(row, col) of the crop's top-left corner on the canvas."""
        return (self.canvas[0] - self.crop[0]) // 2, (self.canvas[1] - self.crop[1]) // 2

    @classmethod
    def from_dict(cls, d: dict, **overrides) -> "SimConfig":
        kw = dict(d)
        kw.update(overrides)
        for k in ("length_dist", "speed_dist", "turn_rate_dist", "instability_dist"):
            if k in kw and isinstance(kw[k], dict):
                kw[k] = GaussianMixture.from_dict(kw[k])
        for k in ("canvas", "crop", "gain", "tint"):
            if k in kw:
                kw[k] = tuple(kw[k])
        if "seed" in kw:
            kw["rng_seed"] = kw.pop("seed")
        known = set(cls.__dataclass_fields__)
        unknown = set(kw) - known
        if unknown:
            raise ConfigError(f"unknown simulator keys: {sorted(unknown)}")
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path | None = None, **overrides) -> "SimConfig":
        d = load_toml(path) if path else packaged("sim_default.toml")
        return cls.from_dict(d.get("simulator", d), **overrides)

    @classmethod
    def toy(cls, **overrides) -> "SimConfig":
        return cls.from_dict(packaged("sim_toy.toml"), **overrides)

    @classmethod
    def default(cls, **overrides) -> "SimConfig":
        return cls.from_dict(packaged("sim_default.toml"), **overrides)


@dataclass
class SimulatedMT:
    """One filament. ``backbone`` is (n, 2) canvas (x, y), head first."""

    uid: int
    backbone: np.ndarray
    length: float
    phase: int
    rate: float
    speed: float
    heading: float
    gain: float
    alive: bool = True

    def copy(self) -> "SimulatedMT":
        return replace(self, backbone=self.backbone.copy())

    @property
    def head(self) -> np.ndarray:
        return self.backbone[0]


def _segment_hit(p: np.ndarray, a: np.ndarray, b: np.ndarray, d: float, t0: float) -> float | None:
    """Smallest t >= t0 with |a + t (b - a) - p| = d, or None when t would exceed 1."""
    v = b - a
    w = a - p
    qa = float(v @ v)
    if qa == 0.0:
        return None
    qb = 2.0 * float(v @ w)
    qc = float(w @ w) - d * d
    disc = qb * qb - 4.0 * qa * qc
    if disc < 0.0:
        return None
    r = math.sqrt(disc)
    for t in sorted(((-qb - r) / (2 * qa), (-qb + r) / (2 * qa))):
        if t0 - 1e-12 <= t <= 1.0:
            return max(t, t0)
    return None


def _resample(path: np.ndarray, length: float, spacing: float) -> np.ndarray:
    """Joints along ``path`` with consecutive chords of exactly ``spacing``.

    The last chord is shorter so the chords add up to ``length``; the path
    is extended straight past its end when it runs out.
    """
    keep = np.r_[True, np.hypot(*np.diff(path, axis=0).T) > 0]
    path = np.asarray(path, dtype=np.float64)[keep]
    n = int(math.floor(length / spacing + 1e-12))
    chords = [spacing] * n
    rest = length - n * spacing
    if rest > 1e-9:
        chords.append(rest)
    if len(path) >= 2:
        tail = path[-1] - path[-2]
        tail = tail / np.hypot(*tail)
    else:
        tail = np.array([-1.0, 0.0])
    # far end of the straight extension, long enough for any remaining chords
    ext = np.vstack([path, path[-1] + tail * (length + spacing)])
    out = [ext[0].copy()]
    k, t = 0, 0.0
    for d in chords:
        p = out[-1]
        while True:
            hit = _segment_hit(p, ext[k], ext[k + 1], d, t)
            if hit is not None:
                t = hit
                break
            k += 1
            t = 0.0
        out.append(ext[k] + t * (ext[k + 1] - ext[k]))
    return np.array(out)


def _straight_backbone(head, heading, length, spacing):
    d = -np.array([math.cos(heading), math.sin(heading)])
    n = int(math.floor(length / spacing + 1e-12))
    s = np.arange(n + 1) * spacing
    if s[-1] < length - 1e-9:
        s = np.append(s, length)
    return np.asarray(head, dtype=np.float64)[None, :] + s[:, None] * d[None, :]


def point_segment_distance(px, py, pts: np.ndarray) -> np.ndarray:
    """Distance from points (px, py) (any equal shapes) to a polyline ``pts``."""
    px = np.asarray(px, dtype=np.float64)[..., None]
    py = np.asarray(py, dtype=np.float64)[..., None]
    if len(pts) == 1:
        return np.hypot(px - pts[0, 0], py - pts[0, 1])[..., 0]
    a, b = pts[:-1], pts[1:]
    dx, dy = b[:, 0] - a[:, 0], b[:, 1] - a[:, 1]
    l2 = dx * dx + dy * dy
    l2 = np.where(l2 == 0, 1.0, l2)
    t = np.clip(((px - a[:, 0]) * dx + (py - a[:, 1]) * dy) / l2, 0.0, 1.0)
    qx = a[:, 0] + t * dx
    qy = a[:, 1] + t * dy
    return np.hypot(px - qx, py - qy).min(axis=-1)


class World:
    """Mutable simulation state plus the bookkeeping the tests inspect."""

    def __init__(self, cfg: SimConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.mts: list[SimulatedMT] = []
        self.next_uid = 0
        self.spawn_lengths: list[float] = []
        self.phase_counts = np.zeros(3, dtype=np.int64)

    def spawn(self, head=None, heading=None) -> SimulatedMT:
        cfg, rng = self.cfg, self.rng
        H, W = cfg.canvas
        if head is None:
            head = (rng.uniform(0, W), rng.uniform(0, H))
        if heading is None:
            heading = rng.uniform(0, 2 * math.pi)
        length = max(sample(cfg.length_dist, rng), cfg.mt_width)
        self.spawn_lengths.append(length)
        phase, rate = cfg.instability_dist.sample_mode(rng)
        speed = sample(cfg.speed_dist, rng)
        gain = rng.uniform(*cfg.gain)
        mt = SimulatedMT(self.next_uid, _straight_backbone(head, heading, length, cfg.segment_spacing),
                         length, phase, rate, speed, float(heading), float(gain))
        self.next_uid += 1
        self.mts.append(mt)
        return mt


def _fully_outside(mt: SimulatedMT, cfg: SimConfig) -> bool:
    H, W = cfg.canvas
    b = mt.backbone
    r = cfg.mt_width / 2
    return bool(np.all((b[:, 0] < -r) | (b[:, 0] > W - 1 + r) | (b[:, 1] < -r) | (b[:, 1] > H - 1 + r)))


def step(world: World | list[SimulatedMT], cfg: SimConfig, rng: np.random.Generator) -> World:
    """Advance the world by one frame (in place) and return it."""
    if not isinstance(world, World):
        w = World(cfg, rng)
        w.mts = list(world)
        w.next_uid = max((m.uid for m in world), default=-1) + 1
        world = w
    mts = world.mts
    # positions before motion decide collisions
    old = [m.backbone.copy() for m in mts]
    for i, mt in enumerate(mts):
        if rng.random() < cfg.phase_switch_prob:
            mt.phase, mt.rate = cfg.instability_dist.sample_mode(rng)
        world.phase_counts[mt.phase] += 1
        turn = sample(cfg.turn_rate_dist, rng)
        if cfg.collision_prob > 0 and len(mts) > 1:
            hx, hy = old[i][0]
            hit = any(point_segment_distance(hx, hy, old[j]) < cfg.mt_width
                      for j in range(len(mts)) if j != i)
            if hit and rng.random() < cfg.collision_prob:
                turn += cfg.collision_turn_std * rng.standard_normal()
        if turn != 0.0:
            mt.heading = float((mt.heading + turn) % (2 * math.pi))
        if mt.phase == GROW:
            new_len = mt.length + mt.rate
        elif mt.phase == SHRINK:
            new_len = mt.length - mt.rate
        else:
            new_len = mt.length
        new_len = min(max(new_len, cfg.mt_width), cfg.length_dist.hi)
        if mt.speed != 0.0 or new_len != mt.length:
            d = np.array([math.cos(mt.heading), math.sin(mt.heading)])
            new_head = mt.backbone[0] + mt.speed * d
            path = np.vstack([new_head[None, :], mt.backbone]) if mt.speed != 0.0 else mt.backbone
            mt.backbone = _resample(path, new_len, cfg.segment_spacing)
            mt.length = new_len
    for mt in mts:
        if _fully_outside(mt, cfg):
            mt.alive = False
    alive = [m for m in mts if m.alive]
    if cfg.disappear_rate > 0 and alive:
        k = min(int(rng.poisson(cfg.disappear_rate)), len(alive))
        if k:
            gone = set(rng.choice(len(alive), size=k, replace=False).tolist())
            for i in gone:
                alive[i].alive = False
            alive = [m for i, m in enumerate(alive) if i not in gone]
    world.mts = alive
    if cfg.appear_rate > 0:
        k = int(rng.poisson(cfg.appear_rate))
        for _ in range(k):
            if len(world.mts) >= cfg.max_count:
                break
            world.spawn()
    return world


def leading_point(backbone: np.ndarray, cfg: SimConfig, step_px: float = 0.25):
    """First point along the backbone (from the head) that falls inside the crop, in crop coords."""
    r0, c0 = cfg.crop_origin
    h1, w1 = cfg.crop
    pts = backbone - np.array([c0, r0], dtype=np.float64)
    for a, b in zip(pts[:-1], pts[1:]):
        n = max(1, int(math.ceil(np.hypot(*(b - a)) / step_px)))
        for t in np.linspace(0.0, 1.0, n + 1):
            p = a + t * (b - a)
            # pixel-centre convention: the point must round onto a crop pixel
            if -0.5 <= p[0] < w1 - 0.5 and -0.5 <= p[1] < h1 - 0.5:
                return float(min(max(p[0], 0.0), w1 - 1e-9)), float(min(max(p[1], 0.0), h1 - 1e-9))
    if len(pts) == 1:
        p = pts[0]
        if -0.5 <= p[0] < w1 - 0.5 and -0.5 <= p[1] < h1 - 0.5:
            return float(max(p[0], 0.0)), float(max(p[1], 0.0))
    return None


def mt_mask(mt: SimulatedMT, cfg: SimConfig) -> np.ndarray:
    """Binary crop-sized mask of pixels within half a width of the backbone."""
    r0, c0 = cfg.crop_origin
    h1, w1 = cfg.crop
    r = cfg.mt_width / 2.0
    pts = mt.backbone - np.array([c0, r0], dtype=np.float64)
    x0 = max(int(math.floor(pts[:, 0].min() - r)), 0)
    x1 = min(int(math.ceil(pts[:, 0].max() + r)), w1 - 1)
    y0 = max(int(math.floor(pts[:, 1].min() - r)), 0)
    y1 = min(int(math.ceil(pts[:, 1].max() + r)), h1 - 1)
    out = np.zeros((h1, w1), dtype=bool)
    if x0 > x1 or y0 > y1:
        return out
    yy, xx = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    out[y0:y1 + 1, x0:x1 + 1] = point_segment_distance(xx, yy, pts) <= r
    return out


def render(world: World | list[SimulatedMT], cfg: SimConfig, rng: np.random.Generator | None = None,
           frame_index: int = 0, intensity_scale: float = 1.0, noise: bool = True):
    """Draw the crop. Returns (Frame, LabelStack, {uid: HeadPoint}, clean_intensity)."""
    mts = world.mts if isinstance(world, World) else world
    h1, w1 = cfg.crop
    inten = np.full((h1, w1), cfg.background)
    masks, heads = [], {}
    min_area = cfg.mt_width ** 2
    for mt in mts:
        m = mt_mask(mt, cfg)
        if not m.any():
            continue
        inten += intensity_scale * mt.gain * m
        if m.sum() < min_area:
            continue
        hp = leading_point(mt.backbone, cfg)
        if hp is None:
            continue
        masks.append(InstanceMask.from_array(m, mt.uid, frame_index))
        heads[mt.uid] = HeadPoint(hp[0], hp[1], frame_index, "truth")
    clean = np.minimum(inten, 1.0)
    rgb = clean[:, :, None] * np.asarray(cfg.tint)[None, None, :]
    if noise and cfg.noise_std > 0:
        if rng is None:
            raise ValueError("rng required when noise is on")
        rgb = rgb + cfg.noise_std * rng.standard_normal(rgb.shape)
    frame = Frame.from_float(np.clip(rgb, 0.0, 1.0), frame_index, frame_index / cfg.frame_rate)
    return frame, LabelStack(tuple(masks), (h1, w1)), heads, clean


@dataclass
class SimResult:
    sequence: ImageSequence
    labels: list[LabelStack]
    heads: list[dict[int, HeadPoint]]
    spawn_lengths: list[float] = field(default_factory=list)
    phase_counts: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.int64))

    def __iter__(self):
        # allows ``seq, labels, heads = generate(cfg)``
        return iter((self.sequence, self.labels, self.heads))

    @property
    def max_count(self) -> int:
        return max((len(s) for s in self.labels), default=0)


def generate(cfg: SimConfig) -> SimResult:
    """Simulate ``warmup_frames + num_frames`` steps and emit the last ``num_frames``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.rng_seed)
    world = World(cfg, rng)
    for _ in range(min(cfg.initial_count, cfg.max_count)):
        world.spawn()
    for _ in range(cfg.warmup_frames):
        step(world, cfg, rng)
    frames, labels, heads = [], [], []
    for t in range(cfg.num_frames):
        scale = max(0.0, 1.0 - cfg.bleach_per_frame * t)
        f, ls, hd, _ = render(world, cfg, rng, t, scale)
        frames.append(f)
        labels.append(ls)
        heads.append(hd)
        if t + 1 < cfg.num_frames:
            step(world, cfg, rng)
    seq = ImageSequence(tuple(frames), cfg.frame_rate)
    return SimResult(seq, labels, heads, list(world.spawn_lengths), world.phase_counts.copy())


def generate_many(cfg: SimConfig, count: int, seed: int | None = None, jobs: int = 1) -> list[SimResult]:
    """``count`` sequences with independent per-sequence seeds derived from one seed."""
    base = cfg.rng_seed if seed is None else seed
    seeds = np.random.SeedSequence(base).generate_state(count)
    cfgs = [replace(cfg, rng_seed=int(s)) for s in seeds]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as ex:
            return list(ex.map(generate, cfgs))
    return [generate(c) for c in cfgs]

"""Deterministic synthetic planar world standing in for robot-collected data.

Coordinates are pixels on a 64x64 canvas, x to the right (columns) and y
down (rows). Every label comes from an exact geometric rule, so learning
progress can be measured against a known oracle.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import GeometryError

CANVAS = 64
MARGIN = 4.0
BACKGROUND = np.array([0.1, 0.1, 0.1])
SUPERSAMPLE = 4
N_ANGLES = 18

GRASP_WIDTH = 12.0  # gripper opening, pixels
STIFFNESS_RANGE = (0.5, 2.0)
MASS_RANGE = (0.3, 3.0)
DENSITY_RANGE = (0.8, 1.2)
PUSH_GAIN = 1.0
ROT_GAIN = 0.5
HEIGHT_GAIN = {-0.5: 1.0, 0.5: 0.6}  # low push vs high push
POKE_SLOPE_COEF = 0.5
POKE_INTERCEPT_COEF = 8.0
NEG_BACKGROUND_FRACTION = 0.5  # share of negative grasps placed off the object

OBJECT_NAMESPACE = 7_310_041
POOLS = {"train": 0, "novel": 1}


@dataclass(frozen=True, eq=False)
class WorldObject:
    """A convex polygon or an ellipse with physical attributes.

    ``shape`` holds object-frame vertices (polygon, CCW, area centroid at the
    origin) or the two semi-axes (ellipse).
    """

    kind: str
    shape: np.ndarray
    color: Tuple[float, float, float]
    pose: Tuple[float, float, float]
    graspable_width: float
    stiffness: float
    mass: float
    ident: Optional[tuple] = None

    def with_pose(self, pose) -> "WorldObject":
        return dataclasses.replace(self, pose=tuple(float(v) for v in pose))

    def translated(self, dx: float, dy: float) -> "WorldObject":
        cx, cy, th = self.pose
        return self.with_pose((cx + dx, cy + dy, th))

    def key(self) -> tuple:
        """Hashable fingerprint of every attribute, for identity audits."""
        return (self.kind, self.shape.round(12).tobytes(), tuple(round(c, 12) for c in self.color),
                tuple(round(p, 12) for p in self.pose), self.graspable_width, self.stiffness, self.mass)

    # -- frames ---------------------------------------------------------------------

    def _rot(self) -> np.ndarray:
        th = self.pose[2]
        c, s = math.cos(th), math.sin(th)
        return np.array([[c, -s], [s, c]])

    def to_local(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts, dtype=np.float64) - np.array(self.pose[:2])) @ self._rot()

    def dir_to_local(self, d: np.ndarray) -> np.ndarray:
        return np.asarray(d, dtype=np.float64) @ self._rot()

    def world_vertices(self) -> np.ndarray:
        if self.kind != "polygon":
            raise ValueError("ellipses have no vertices")
        return self.shape @ self._rot().T + np.array(self.pose[:2])

    # -- geometry ---------------------------------------------------------------------

    @property
    def area(self) -> float:
        if self.kind == "ellipse":
            a, b = self.shape
            return math.pi * a * b
        return _polygon_area(self.shape)

    @property
    def radius(self) -> float:
        """Largest distance from the centroid to the boundary."""
        if self.kind == "ellipse":
            return float(max(self.shape))
        return float(np.sqrt((self.shape ** 2).sum(axis=1)).max())

    def contains(self, pts: np.ndarray) -> np.ndarray:
        local = self.to_local(pts)
        if self.kind == "ellipse":
            a, b = self.shape
            return (local[..., 0] / a) ** 2 + (local[..., 1] / b) ** 2 <= 1.0
        v = self.shape
        e = np.roll(v, -1, axis=0) - v
        inside = np.ones(local.shape[:-1], dtype=bool)
        for (vx, vy), (ex, ey) in zip(v, e):
            inside &= ex * (local[..., 1] - vy) - ey * (local[..., 0] - vx) >= 0.0
        return inside

    def support(self, d) -> float:
        """max over the object of <x - centroid, d>."""
        u = self.dir_to_local(d)
        if self.kind == "ellipse":
            a, b = self.shape
            return float(math.hypot(a * u[0], b * u[1]))
        return float((self.shape @ u).max())

    def extent(self) -> Tuple[float, float, float, float]:
        """World-frame bounding box (xmin, ymin, xmax, ymax)."""
        cx, cy, _ = self.pose
        return (cx - self.support((-1.0, 0.0)), cy - self.support((0.0, -1.0)),
                cx + self.support((1.0, 0.0)), cy + self.support((0.0, 1.0)))

    def fits(self, margin: float = MARGIN) -> bool:
        x0, y0, x1, y1 = self.extent()
        return x0 >= margin and y0 >= margin and x1 <= CANVAS - margin and y1 <= CANVAS - margin

    def clip_line(self, p, d) -> Optional[Tuple[float, float]]:
        """Parameters (t0, t1) where the line p + t*d is inside the object, or None."""
        p = self.to_local(np.asarray(p, dtype=np.float64))
        d = self.dir_to_local(d)
        if self.kind == "ellipse":
            a, b = self.shape
            qa = (d[0] / a) ** 2 + (d[1] / b) ** 2
            qb = 2 * (p[0] * d[0] / a ** 2 + p[1] * d[1] / b ** 2)
            qc = (p[0] / a) ** 2 + (p[1] / b) ** 2 - 1.0
            disc = qb * qb - 4 * qa * qc
            if qa == 0.0 or disc < 0.0:
                return None
            r = math.sqrt(disc)
            return ((-qb - r) / (2 * qa), (-qb + r) / (2 * qa))
        t0, t1 = -math.inf, math.inf
        v = self.shape
        e = np.roll(v, -1, axis=0) - v
        for (vx, vy), (ex, ey) in zip(v, e):
            # inside when f(t) = num + den*t >= 0
            num = ex * (p[1] - vy) - ey * (p[0] - vx)
            den = ex * d[1] - ey * d[0]
            if den == 0.0:
                if num < 0.0:
                    return None
                continue
            t = -num / den
            if den > 0:
                t0 = max(t0, t)
            else:
                t1 = min(t1, t)
        if t0 > t1:
            return None
        return (float(t0), float(t1))


def _polygon_area(v: np.ndarray) -> float:
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _polygon_centroid(v: np.ndarray) -> np.ndarray:
    x, y = v[:, 0], v[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    a = cross.sum() / 2.0
    return np.array([((x + xn) * cross).sum(), ((y + yn) * cross).sum()]) / (6.0 * a)


def rectangle(width: float, height: float, center=(32.0, 32.0), theta: float = 0.0, **attrs) -> WorldObject:
    """Axis-aligned (in the object frame) rectangle; handy for tests and demos."""
    w, h = width / 2.0, height / 2.0
    shape = np.array([[-w, -h], [w, -h], [w, h], [-w, h]])
    defaults = dict(color=(0.8, 0.5, 0.3), graspable_width=GRASP_WIDTH, stiffness=1.0, mass=1.0)
    defaults.update(attrs)
    return WorldObject("polygon", shape, pose=(float(center[0]), float(center[1]), float(theta)), **defaults)


# -- generation ---------------------------------------------------------------------------


def gen_object(rng_seed, graspable_width: float = GRASP_WIDTH) -> WorldObject:
    """Draw one object; identical seeds give identical objects."""
    rng = np.random.default_rng(rng_seed)
    a = rng.uniform(6.0, 13.0)
    b = rng.uniform(3.5, a)
    if rng.random() < 0.25:
        kind, shape = "ellipse", np.array([a, b])
    else:
        kind = "polygon"
        n = int(rng.integers(3, 9))
        while True:
            gaps = rng.uniform(0.3, 1.3, size=n)
            gaps *= 2 * math.pi / gaps.sum()
            if gaps.max() < 0.9 * math.pi:
                break
        phi = rng.uniform(0, 2 * math.pi) + np.concatenate([[0.0], np.cumsum(gaps[:-1])])
        shape = np.stack([a * np.cos(phi), b * np.sin(phi)], axis=1)
        shape = shape - _polygon_centroid(shape)
    stiffness = float(rng.uniform(*STIFFNESS_RANGE))
    t = (stiffness - STIFFNESS_RANGE[0]) / (STIFFNESS_RANGE[1] - STIFFNESS_RANGE[0])
    color = np.clip(np.array([0.3 + 0.65 * t, rng.uniform(0.3, 0.7), 0.95 - 0.65 * t])
                    + rng.uniform(-0.05, 0.05, size=3), 0.2, 1.0)
    obj = WorldObject(kind, shape, tuple(float(c) for c in color), (0.0, 0.0, 0.0),
                      float(graspable_width), stiffness, 1.0, ident=_ident(rng_seed))
    area = obj.area
    mass = float(np.clip(rng.uniform(*DENSITY_RANGE) * area / 100.0, *MASS_RANGE))
    theta = float(rng.uniform(0.0, math.pi))
    obj = dataclasses.replace(obj, mass=mass, pose=(0.0, 0.0, theta))
    x0, y0, x1, y1 = obj.extent()
    cx = rng.uniform(MARGIN - x0, CANVAS - MARGIN - x1)
    cy = rng.uniform(MARGIN - y0, CANVAS - MARGIN - y1)
    return obj.with_pose((cx, cy, theta))


def _ident(seed) -> tuple:
    return tuple(int(s) for s in np.atleast_1d(seed))


def object_seed(pool: str, index: int) -> tuple:
    """Seeds for the two pools live in disjoint namespaces by construction."""
    if pool not in POOLS:
        raise ValueError(f"unknown pool {pool!r}; expected one of {sorted(POOLS)}")
    return (OBJECT_NAMESPACE, POOLS[pool], int(index))


# -- rendering ------------------------------------------------------------------------------

def _subsample_grid(side: int = CANVAS, ss: int = SUPERSAMPLE) -> np.ndarray:
    offs = (np.arange(ss) + 0.5) / ss
    coords = (np.arange(side)[:, None] + offs[None, :]).reshape(-1)
    ys, xs = np.meshgrid(coords, coords, indexing="ij")
    return np.stack([xs, ys], axis=-1)


_GRID = _subsample_grid()


def rasterize(obj: Optional[WorldObject], origin=(0.0, 0.0)) -> np.ndarray:
    """Anti-aliased 64x64x3 image of the window whose top-left corner is ``origin``."""
    img = np.empty((CANVAS, CANVAS, 3))
    img[:] = BACKGROUND
    if obj is None:
        return img
    pts = _GRID + np.asarray(origin, dtype=np.float64)
    cov = obj.contains(pts).astype(np.float64)
    cov = cov.reshape(CANVAS, SUPERSAMPLE, CANVAS, SUPERSAMPLE).mean(axis=(1, 3))
    return img + cov[..., None] * (np.asarray(obj.color) - BACKGROUND)


def render(obj: Optional[WorldObject]) -> np.ndarray:
    """Full-canvas image in [0, 1]; ``None`` renders the empty table."""
    if obj is not None:
        x0, y0, x1, y1 = obj.extent()
        if x0 < 0 or y0 < 0 or x1 > CANVAS or y1 > CANVAS:
            raise GeometryError(f"object extent {(x0, y0, x1, y1)} leaves the {CANVAS}x{CANVAS} canvas")
    return rasterize(obj)


def render_patch(obj: WorldObject, center) -> np.ndarray:
    """Patch of the scene centred on ``center`` (the grasp point)."""
    cx, cy = center
    return rasterize(obj, origin=(cx - CANVAS / 2, cy - CANVAS / 2))


def to_u8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


# -- oracles -----------------------------------------------------------------------------------

def angle_of(theta_d: int) -> float:
    return math.radians(10.0 * theta_d)


def grasp_width(obj: WorldObject, point, theta_d: int) -> float:
    """Chord length through ``point`` along the gripper closing direction (angle + 90 deg)."""
    phi = angle_of(theta_d) + math.pi / 2
    span = obj.clip_line(point, (math.cos(phi), math.sin(phi)))
    if span is None:
        return 0.0
    return span[1] - span[0]


def label_grasp(obj: WorldObject, point, theta_d: int) -> int:
    """1 iff the point is on the object and the chord across the jaws fits the gripper."""
    x, y = point
    if not (0.0 <= x <= CANVAS and 0.0 <= y <= CANVAS):
        raise GeometryError(f"grasp point {point} is off the canvas")
    if not 0 <= theta_d < N_ANGLES:
        raise IndexError(f"theta_D {theta_d} out of range")
    if not obj.contains(np.array([x, y], dtype=np.float64)):
        return 0
    return int(grasp_width(obj, point, theta_d) <= obj.graspable_width)


@dataclass(frozen=True)
class PushOutcome:
    moved: WorldObject
    contact: Optional[np.ndarray]
    push_vector: np.ndarray  # travel after contact, pixels
    translation: np.ndarray
    rotation: float


def simulate_push(obj: WorldObject, start, final, height: float = -0.5) -> PushOutcome:
    """Quasi-static push: translation k*g*v/m, rotation from the contact moment arm.

    ``v`` is the part of the pusher's travel after first contact. A segment
    that never reaches the object leaves it untouched.
    """
    s = np.asarray(start, dtype=np.float64)
    f = np.asarray(final, dtype=np.float64)
    seg = f - s
    zero = np.zeros(2)
    span = obj.clip_line(s, seg) if np.any(seg) else None
    if span is None or span[1] < 0.0 or span[0] >= 1.0:
        return PushOutcome(obj, None, zero, zero, 0.0)
    tc = max(span[0], 0.0)
    contact = s + tc * seg
    v = f - contact
    gain = PUSH_GAIN * HEIGHT_GAIN[float(height)] / obj.mass
    translation = gain * v
    arm = contact - np.array(obj.pose[:2])
    rotation = ROT_GAIN * HEIGHT_GAIN[float(height)] * (arm[0] * v[1] - arm[1] * v[0]) / (obj.mass * obj.radius ** 2)
    cx, cy, th = obj.pose
    moved = obj.with_pose((cx + translation[0], cy + translation[1], th + rotation))
    return PushOutcome(moved, contact, v, translation, rotation)


def poke_response(obj: WorldObject, noise_sigma: float = 0.0,
                  rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """(slope, intercept): slope tracks stiffness, intercept the contact-area fraction."""
    r = np.array([POKE_SLOPE_COEF * obj.stiffness,
                  POKE_INTERCEPT_COEF * obj.area / CANVAS ** 2])
    if noise_sigma > 0.0:
        if rng is None:
            raise ValueError("noisy poke response needs an rng")
        r = r + rng.normal(0.0, noise_sigma, size=2)
    return r


simulate_poke = poke_response


def normalize_xy(p) -> np.ndarray:
    return np.asarray(p, dtype=np.float64) / (CANVAS / 2) - 1.0


def denormalize_xy(p) -> np.ndarray:
    return (np.asarray(p, dtype=np.float64) + 1.0) * (CANVAS / 2)


# -- samplers --------------------------------------------------------------------------------


@dataclass
class GraspSample:
    patch: np.ndarray  # u8 64x64x3
    theta_d: int
    y: int
    obj: WorldObject
    point: Tuple[float, float]


@dataclass
class PushSample:
    begin: np.ndarray
    end: np.ndarray
    action: np.ndarray  # normalised (xs, ys, xf, yf, z)
    outcome: PushOutcome
    obj: WorldObject


@dataclass
class PokeSample:
    image: np.ndarray
    response: np.ndarray
    obj: WorldObject


class ObjectPool:
    """A fixed, indexable set of objects; the train and novel pools never overlap."""

    def __init__(self, pool: str, size: int, graspable_width: float = GRASP_WIDTH):
        self.pool = pool
        self.size = int(size)
        self.graspable_width = graspable_width
        self._cache: dict = {}

    def seed_of(self, k: int) -> tuple:
        return object_seed(self.pool, k)

    def __getitem__(self, k: int) -> WorldObject:
        k = int(k)
        if not 0 <= k < self.size:
            raise IndexError(k)
        obj = self._cache.get(k)
        if obj is None:
            obj = self._cache[k] = gen_object(self.seed_of(k), self.graspable_width)
        return obj

    def __len__(self) -> int:
        return self.size

    def draw(self, rng: np.random.Generator) -> WorldObject:
        return self[rng.integers(self.size)]


def _point_in(obj: WorldObject, rng: np.random.Generator) -> np.ndarray:
    x0, y0, x1, y1 = obj.extent()
    while True:
        p = rng.uniform((x0, y0), (x1, y1))
        if obj.contains(p):
            return p


def _point_near(obj: WorldObject, rng: np.random.Generator, pad: float = 8.0) -> np.ndarray:
    x0, y0, x1, y1 = obj.extent()
    lo = np.maximum([x0 - pad, y0 - pad], 0.0)
    hi = np.minimum([x1 + pad, y1 + pad], float(CANVAS))
    return rng.uniform(lo, hi)


def sample_grasp(pool: ObjectPool, rng: np.random.Generator, balanced: bool = True,
                 max_tries: int = 64) -> GraspSample:
    """One grasp attempt. Balanced mode draws the label first and rejects until it is met."""
    if not balanced:
        obj = pool.draw(rng)
        p = _point_near(obj, rng)
        th = int(rng.integers(N_ANGLES))
        return _grasp(obj, p, th)
    want = int(rng.random() < 0.5)
    off_object = want == 0 and rng.random() < NEG_BACKGROUND_FRACTION
    while True:
        obj = pool.draw(rng)
        for _ in range(max_tries):
            if off_object:
                p = _point_near(obj, rng)
                if obj.contains(p):
                    continue
            else:
                p = _point_in(obj, rng)
            th = int(rng.integers(N_ANGLES))
            if label_grasp(obj, p, th) == want:
                return _grasp(obj, p, th)


def _grasp(obj: WorldObject, p, th: int) -> GraspSample:
    point = (float(p[0]), float(p[1]))
    return GraspSample(to_u8(render_patch(obj, point)), th, label_grasp(obj, point, th), obj, point)


def sample_push(pool: ObjectPool, rng: np.random.Generator) -> PushSample:
    """A push whose segment hits the object and leaves it inside the margin.

    Pushes that would carry the object out of the canvas are discarded and redrawn.
    """
    while True:
        obj = pool.draw(rng)
        phi = rng.uniform(0.0, 2 * math.pi)
        d = np.array([math.cos(phi), math.sin(phi)])
        perp = np.array([-d[1], d[0]])
        half = min(obj.support(perp), obj.support(-perp))
        centre = np.array(obj.pose[:2])
        start = centre + rng.uniform(-0.8, 0.8) * half * perp - d * (obj.radius + rng.uniform(2.0, 6.0))
        span = obj.clip_line(start, d)
        if span is None:
            continue
        final = start + d * (span[0] + rng.uniform(3.0, 10.0))
        if not (np.all(start >= 0) and np.all(start <= CANVAS) and np.all(final >= 0) and np.all(final <= CANVAS)):
            continue
        height = float(rng.choice([-0.5, 0.5]))
        out = simulate_push(obj, start, final, height)
        if out.contact is None or not out.moved.fits():
            continue
        action = np.concatenate([normalize_xy(start), normalize_xy(final), [height]])
        return PushSample(to_u8(render(obj)), to_u8(render(out.moved)), action, out, obj)


def sample_poke(pool: ObjectPool, rng: np.random.Generator, noise_sigma: float = 0.0) -> PokeSample:
    obj = pool.draw(rng)
    return PokeSample(to_u8(render(obj)), poke_response(obj, noise_sigma, rng), obj)


def translation_probe(samples: Sequence[PushSample]) -> Tuple[np.ndarray, float]:
    """Least-squares map from mass/gain-scaled pose deltas to the post-contact push vector.

    The post-contact vector is recovered from the stored action (its end point
    minus the contact point). Returns ``(coefficients, max_abs_residual)``; a
    residual at round-off level certifies the labels are a deterministic
    function of the object motion.
    """
    feats, targets = [], []
    for s in samples:
        out = s.outcome
        dx, dy = np.array(out.moved.pose[:2]) - np.array(s.obj.pose[:2])
        scale = s.obj.mass / HEIGHT_GAIN[float(s.action[4])]
        feats.append([dx * scale, dy * scale, 1.0])
        targets.append(denormalize_xy(s.action[2:4]) - out.contact)
    x = np.asarray(feats)
    t = np.asarray(targets)
    coef, *_ = np.linalg.lstsq(x, t, rcond=None)
    resid = float(np.abs(x @ coef - t).max())
    return coef, resid

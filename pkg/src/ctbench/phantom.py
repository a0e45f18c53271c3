"""Procedural z-correlated ellipse phantoms in HU.

A phantom is a water body ellipse (0 HU inside, -1000 HU air outside) plus
additive elliptical inserts.  Insert centers and semi-axes scale with the
slice index, which gives adjacent slices the correlated structure a
multi-slice network can exploit.  Every phantom keeps a documented rectangle
(UNIFORM_ZONE) free of inserts so noise statistics can be measured on a flat
region of each reconstruction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import Image2D, SliceStack

AIR_HU = -1000.0
BODY_HU_STEP = 1000.0  # air -> water
SUBPIXEL = 4  # anti-aliasing subsamples per axis

# Insert-free rectangle in mm, (x_min, x_max, y_min, y_max).  On the default
# 64 px / 1 mm grid this is the pixel rect x0=8, y0=20, w=24, h=24.
UNIFORM_ZONE = (-24.0, 0.0, -12.0, 12.0)
_ZONE_MARGIN = 1.5  # mm clearance between inserts and the zone


@dataclass(frozen=True, eq=False)
class EllipseSpec:
    center: tuple  # (x, y) mm
    semi_axes: tuple  # (a, b) mm
    angle: float  # radians
    delta_hu: float  # HU added inside

    def __post_init__(self):
        cx, cy = (float(v) for v in self.center)
        a, b = (float(v) for v in self.semi_axes)
        if not (a > 0 and b > 0):
            raise ValueError(f"semi_axes must be > 0, got ({a}, {b})")
        if abs(self.delta_hu) > 3000:
            raise ValueError(f"|delta_hu| must be <= 3000, got {self.delta_hu}")
        object.__setattr__(self, "center", (cx, cy))
        object.__setattr__(self, "semi_axes", (a, b))
        object.__setattr__(self, "angle", float(self.angle))
        object.__setattr__(self, "delta_hu", float(self.delta_hu))

    def boundary_points(self, n: int = 64, scale: float = 1.0) -> np.ndarray:
        """n (x, y) samples of the (optionally scaled) boundary."""
        t = np.linspace(0, 2 * np.pi, n, endpoint=False)
        a, b = self.semi_axes[0] * scale, self.semi_axes[1] * scale
        ca, sa = math.cos(self.angle), math.sin(self.angle)
        ex, ey = a * np.cos(t), b * np.sin(t)
        x = self.center[0] * scale + ca * ex - sa * ey
        y = self.center[1] * scale + sa * ex + ca * ey
        return np.stack([x, y], axis=1)

    def contains(self, x, y, scale: float = 1.0):
        """Point-in-ellipse test with centers/axes scaled by ``scale``."""
        ca, sa = math.cos(self.angle), math.sin(self.angle)
        dx = x - self.center[0] * scale
        dy = y - self.center[1] * scale
        u = (ca * dx + sa * dy) / (self.semi_axes[0] * scale)
        v = (-sa * dx + ca * dy) / (self.semi_axes[1] * scale)
        return u * u + v * v <= 1.0


@dataclass(frozen=True, eq=False)
class PhantomSpec:
    body: EllipseSpec  # water background; its delta_hu is ignored
    inserts: tuple
    z_drift: float  # per-slice fractional change of insert centers/axes
    n_slices: int
    seed: int

    def __post_init__(self):
        inserts = tuple(self.inserts)
        if self.n_slices < 1:
            raise ValueError("n_slices must be >= 1")
        if self.z_drift < 0:
            raise ValueError("z_drift must be >= 0")
        for k, ins in enumerate(inserts):
            for s in self._extreme_scales():
                pts = ins.boundary_points(scale=s)
                if not np.all(self.body.contains(pts[:, 0], pts[:, 1])):
                    raise ValueError(f"insert {k} leaves the body at drift scale {s:.4f}")
        object.__setattr__(self, "inserts", inserts)

    def _extreme_scales(self):
        t = (self.n_slices - 1) / 2.0
        return (1.0 - self.z_drift * t, 1.0 + self.z_drift * t)

    def drift_scale(self, slice_index: int) -> float:
        """Common scale factor applied to insert centers/axes at this slice."""
        t = slice_index - (self.n_slices - 1) / 2.0
        return 1.0 + self.z_drift * t


def _subpixel_coords(n: int, pixel_size: float) -> np.ndarray:
    """Subsample coordinates along one axis (n*SUBPIXEL points, mm)."""
    centers = (np.arange(n) - (n - 1) / 2.0) * pixel_size
    offs = (np.arange(SUBPIXEL) - (SUBPIXEL - 1) / 2.0) * (pixel_size / SUBPIXEL)
    return (centers[:, None] + offs[None, :]).reshape(-1)


def _coverage(ellipse: EllipseSpec, xs: np.ndarray, ys: np.ndarray, scale: float) -> np.ndarray:
    """Per-pixel area fraction covered by the ellipse (SUBPIXEL^2 sampling)."""
    inside = ellipse.contains(xs[None, :], ys[:, None], scale=scale)
    h = ys.size // SUBPIXEL
    w = xs.size // SUBPIXEL
    blocks = inside.reshape(h, SUBPIXEL, w, SUBPIXEL)
    return blocks.mean(axis=(1, 3))


def render_slice(spec: PhantomSpec, slice_index: int, width: int = 64, height: int = 64,
                 pixel_size: float = 1.0) -> Image2D:
    """Rasterize one slice to HU with 4x4 subpixel anti-aliasing."""
    if not (0 <= slice_index < spec.n_slices):
        raise ValueError(f"slice_index {slice_index} outside [0, {spec.n_slices})")
    xs = _subpixel_coords(width, pixel_size)
    ys = _subpixel_coords(height, pixel_size)
    scale = spec.drift_scale(slice_index)
    hu = np.full((height, width), AIR_HU)
    hu += BODY_HU_STEP * _coverage(spec.body, xs, ys, scale=1.0)
    for ins in spec.inserts:
        hu += ins.delta_hu * _coverage(ins, xs, ys, scale=scale)
    return Image2D(hu.astype(np.float32), pixel_size)


def render_volume(spec: PhantomSpec, width: int = 64, height: int = 64,
                  pixel_size: float = 1.0, slice_spacing: float = 1.0) -> SliceStack:
    """All slices of the phantom as one stack."""
    slices = [render_slice(spec, k, width, height, pixel_size) for k in range(spec.n_slices)]
    return SliceStack(tuple(slices), slice_spacing)


_INSERT_COUNTS = {"easy": (2, 4), "standard": (4, 7)}


def _rect_clearance(cx: float, cy: float, reach: float) -> bool:
    """True when a disk of radius ``reach`` at (cx, cy) misses the uniform zone."""
    x0, x1, y0, y1 = UNIFORM_ZONE
    dx = max(x0 - cx, 0.0, cx - x1)
    dy = max(y0 - cy, 0.0, cy - y1)
    return math.hypot(dx, dy) > reach + _ZONE_MARGIN


def random_spec(rng_seed: int, difficulty: str = "standard", n_slices: int = 9) -> PhantomSpec:
    """Seeded random phantom; same seed gives an identical spec.

    Inserts are kept clear of UNIFORM_ZONE at every slice so the zone stays
    flat in ground truth.
    """
    if difficulty not in _INSERT_COUNTS:
        raise ValueError(f"unknown difficulty {difficulty!r}")
    rng = np.random.default_rng(rng_seed)
    body = EllipseSpec(center=(0.0, 0.0),
                       semi_axes=(rng.uniform(29.5, 31.0), rng.uniform(28.0, 29.5)),
                       angle=0.0, delta_hu=0.0)
    lo, hi = _INSERT_COUNTS[difficulty]
    n_inserts = int(rng.integers(lo, hi + 1))
    z_drift = float(rng.uniform(0.008, 0.02))
    scale_hi = 1.0 + z_drift * (n_slices - 1) / 2.0
    inserts = []
    attempts = 0
    while len(inserts) < n_inserts and attempts < 1000:
        attempts += 1
        a = float(rng.uniform(2.5, 7.0))
        b = float(rng.uniform(2.5, 7.0))
        cx = float(rng.uniform(-22.0, 22.0))
        cy = float(rng.uniform(-20.0, 20.0))
        angle = float(rng.uniform(0, np.pi))
        mag = float(rng.uniform(30.0, 160.0))
        delta = mag if rng.uniform() < 0.6 else -mag
        cand = EllipseSpec((cx, cy), (a, b), angle, delta)
        slice_scales = [1.0 + z_drift * (k - (n_slices - 1) / 2.0) for k in range(n_slices)]
        if not all(_rect_clearance(cx * s, cy * s, max(a, b) * s) for s in slice_scales):
            continue
        # body is convex and scaling moves boundary points on straight segments,
        # so containment at the extreme scales covers every slice
        ok = True
        for s in (min(slice_scales), max(slice_scales)):
            pts = cand.boundary_points(scale=s)
            if not np.all(body.contains(pts[:, 0], pts[:, 1])):
                ok = False
                break
        if ok:
            inserts.append(cand)
    if len(inserts) < lo:
        raise RuntimeError(f"could not place inserts for seed {rng_seed}")
    return PhantomSpec(body=body, inserts=tuple(inserts), z_drift=z_drift,
                       n_slices=n_slices, seed=int(rng_seed))

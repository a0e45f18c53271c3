"""Parallel-beam forward/back projection and the photon noise model.

The projector is ray-driven with Joseph-style linear interpolation: each ray
steps along its dominant axis one grid line at a time and gathers two pixels
per crossing.  Back projection applies the exact transpose of the same
weights, so <Ax, u> == <x, A'u> up to float rounding.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .core import (
    ByteReader,
    ContainerError,
    DIM_OVERFLOW,
    Image2D,
    KIND_SINOGRAM,
    payload_bytes,
)


@dataclass(frozen=True, eq=False)
class Geometry:
    """Parallel-beam scan description; image grid centered on the isocenter."""

    n_views: int
    angles: np.ndarray  # radians, uniform on [0, pi)
    n_det: int
    det_spacing: float  # mm
    grid: tuple  # (width, height, pixel_size_mm)

    def __post_init__(self):
        if self.n_views < 1 or self.n_det < 1:
            raise ValueError("n_views and n_det must be >= 1")
        if not (self.det_spacing > 0):
            raise ValueError("det_spacing must be > 0")
        w, h, ps = self.grid
        w, h, ps = int(w), int(h), float(ps)
        if w < 1 or h < 1 or not ps > 0:
            raise ValueError(f"bad grid {self.grid}")
        angles = np.asarray(self.angles, dtype=np.float64).copy()
        if angles.shape != (self.n_views,):
            raise ValueError("angles must have n_views entries")
        if angles.size > 1:
            steps = np.diff(angles)
            if not np.allclose(steps, steps[0], atol=1e-9):
                raise ValueError("angles must be uniformly spaced")
        if angles.min() < 0 or angles.max() >= np.pi:
            raise ValueError("angles must lie in [0, pi)")
        diag = math.hypot(w, h) * ps
        if self.n_det * self.det_spacing < diag:
            raise ValueError(
                f"detector span {self.n_det * self.det_spacing:.2f} mm does not cover "
                f"the image diagonal {diag:.2f} mm")
        angles.flags.writeable = False
        object.__setattr__(self, "angles", angles)
        object.__setattr__(self, "grid", (w, h, ps))

    @classmethod
    def parallel(cls, n_views: int, grid: tuple, det_spacing: float | None = None,
                 span_factor: float = 1.5) -> "Geometry":
        """Uniform [0, pi) views with the detector spanning span_factor x diagonal."""
        w, h, ps = grid
        if det_spacing is None:
            det_spacing = float(ps)
        angles = np.arange(n_views) * (np.pi / n_views)
        n_det = int(math.ceil(math.hypot(w, h) * ps * span_factor / det_spacing))
        return cls(n_views, angles, n_det, float(det_spacing), (int(w), int(h), float(ps)))

    def det_coords(self) -> np.ndarray:
        """Detector sample positions (mm), centered on the isocenter."""
        return (np.arange(self.n_det) - (self.n_det - 1) / 2.0) * self.det_spacing


@dataclass(frozen=True, eq=False)
class Sinogram:
    """Line integrals (unitless) on an (n_views, n_det) grid."""

    geometry: Geometry
    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values)
        arr = arr.astype(np.float64 if arr.dtype == np.float64 else np.float32, copy=True)
        if arr.shape != (self.geometry.n_views, self.geometry.n_det):
            raise ValueError(f"sinogram shape {arr.shape} does not match geometry "
                             f"({self.geometry.n_views}, {self.geometry.n_det})")
        if not np.isfinite(arr).all():
            raise ValueError("sinogram values must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)


@dataclass(frozen=True, eq=False)
class CountsSinogram:
    """Measured photon counts per ray with the incident flux i0."""

    geometry: Geometry
    counts: np.ndarray  # nonnegative integers
    i0: float

    def __post_init__(self):
        if not (self.i0 > 0):
            raise ValueError("i0 must be > 0")
        arr = np.asarray(self.counts)
        if not np.issubdtype(arr.dtype, np.integer):
            if not np.all(arr == np.round(arr)):
                raise ValueError("counts must be integers")
        arr = arr.astype(np.int64, copy=True)
        if arr.shape != (self.geometry.n_views, self.geometry.n_det):
            raise ValueError(f"counts shape {arr.shape} does not match geometry")
        if (arr < 0).any():
            raise ValueError("counts must be nonnegative")
        arr.flags.writeable = False
        object.__setattr__(self, "counts", arr)


def _check_grid(img: Image2D, geom: Geometry):
    w, h, ps = geom.grid
    if img.width != w or img.height != h or img.pixel_size != ps:
        raise ValueError(f"image grid ({img.width}, {img.height}, {img.pixel_size}) "
                         f"does not match geometry grid {geom.grid}")


def _view_crossings(geom: Geometry, view: int):
    """Fractional gather indices and weight scale for one view.

    Returns (axis, frac_idx, length) where frac_idx[k, m] is the fractional
    pixel index along the non-dominant axis for detector sample k at step m,
    and length is the per-crossing path length in mm.
    """
    w, h, ps = geom.grid
    theta = geom.angles[view]
    c, s = math.cos(theta), math.sin(theta)
    t = geom.det_coords()
    if abs(c) >= abs(s):
        # ray direction (-s, c) is y-dominant: one crossing per image row
        y = (np.arange(h) - (h - 1) / 2.0) * ps
        x = t[:, None] / c - y[None, :] * (s / c)
        frac = x / ps + (w - 1) / 2.0
        return "y", frac, ps / abs(c)
    x = (np.arange(w) - (w - 1) / 2.0) * ps
    y = t[:, None] / s - x[None, :] * (c / s)
    frac = y / ps + (h - 1) / 2.0
    return "x", frac, ps / abs(s)


def forward_project(img: Image2D, geom: Geometry) -> Sinogram:
    """Radon transform of an attenuation image; linear in the image."""
    _check_grid(img, geom)
    w, h, _ = geom.grid
    vals = img.values.astype(np.float64)
    out = np.empty((geom.n_views, geom.n_det), dtype=np.float64)
    for v in range(geom.n_views):
        axis, frac, length = _view_crossings(geom, v)
        i0 = np.floor(frac).astype(np.int64)
        w1 = frac - i0
        n_pix = w if axis == "y" else h
        ok0 = (i0 >= 0) & (i0 < n_pix)
        ok1 = (i0 + 1 >= 0) & (i0 + 1 < n_pix)
        i0c = np.clip(i0, 0, n_pix - 1)
        i1c = np.clip(i0 + 1, 0, n_pix - 1)
        if axis == "y":
            rows = np.arange(h)[None, :]
            acc = np.where(ok0, (1.0 - w1) * vals[rows, i0c], 0.0)
            acc += np.where(ok1, w1 * vals[rows, i1c], 0.0)
        else:
            cols = np.arange(w)[None, :]
            acc = np.where(ok0, (1.0 - w1) * vals[i0c, cols], 0.0)
            acc += np.where(ok1, w1 * vals[i1c, cols], 0.0)
        out[v] = acc.sum(axis=1) * length
    if img.values.dtype == np.float32:
        out = out.astype(np.float32)
    return Sinogram(geom, out)


def back_project(sino: Sinogram, geom: Geometry) -> Image2D:
    """Exact adjoint of :func:`forward_project` (transposed gather weights)."""
    _require_same_shape(sino, geom)
    w, h, ps = geom.grid
    vals = sino.values.astype(np.float64)
    img = np.zeros(h * w, dtype=np.float64)
    for v in range(geom.n_views):
        axis, frac, length = _view_crossings(geom, v)
        i0 = np.floor(frac).astype(np.int64)
        w1 = frac - i0
        n_pix = w if axis == "y" else h
        ray = vals[v][:, None] * length
        if axis == "y":
            flat0 = np.arange(h)[None, :] * w + i0
            flat1 = flat0 + 1
        else:
            flat0 = i0 * w + np.arange(w)[None, :]
            flat1 = flat0 + w
        ok0 = (i0 >= 0) & (i0 < n_pix)
        ok1 = (i0 + 1 >= 0) & (i0 + 1 < n_pix)
        contrib = np.concatenate([((1.0 - w1) * ray)[ok0], (w1 * ray)[ok1]])
        flat = np.concatenate([flat0[ok0], flat1[ok1]])
        img += np.bincount(flat, weights=contrib, minlength=h * w)
    out = img.reshape(h, w)
    if sino.values.dtype == np.float32:
        out = out.astype(np.float32)
    return Image2D(out, ps)


def _require_same_shape(sino: Sinogram, geom: Geometry):
    if sino.values.shape != (geom.n_views, geom.n_det):
        raise ValueError(f"sinogram shape {sino.values.shape} does not match geometry "
                         f"({geom.n_views}, {geom.n_det})")


def system_matrix(geom: Geometry):
    """Sparse CSC matrix of the Joseph weights, (n_views*n_det, H*W).

    Column j holds every (ray, weight) pair touching pixel j; used by the
    coordinate-descent MBIR solver.  Weights match forward_project exactly.
    """
    from scipy import sparse

    w, h, _ = geom.grid
    rows_out, cols_out, data_out = [], [], []
    for v in range(geom.n_views):
        axis, frac, length = _view_crossings(geom, v)
        i0 = np.floor(frac).astype(np.int64)
        w1 = frac - i0
        n_pix = w if axis == "y" else h
        n_det = geom.n_det
        if axis == "y":
            ray_idx = np.broadcast_to((v * n_det + np.arange(n_det))[:, None], frac.shape)
            flat0 = np.broadcast_to(np.arange(h)[None, :] * w, frac.shape) + i0
            flat1 = flat0 + 1
        else:
            ray_idx = np.broadcast_to((v * n_det + np.arange(n_det))[:, None], frac.shape)
            flat0 = i0 * w + np.broadcast_to(np.arange(w)[None, :], frac.shape)
            flat1 = flat0 + w
        ok0 = (i0 >= 0) & (i0 < n_pix)
        ok1 = (i0 + 1 >= 0) & (i0 + 1 < n_pix)
        rows_out.append(ray_idx[ok0])
        cols_out.append(flat0[ok0])
        data_out.append(((1.0 - w1) * length)[ok0])
        rows_out.append(ray_idx[ok1])
        cols_out.append(flat1[ok1])
        data_out.append((w1 * length)[ok1])
    rows = np.concatenate(rows_out)
    cols = np.concatenate(cols_out)
    data = np.concatenate(data_out)
    mat = sparse.coo_matrix((data, (rows, cols)),
                            shape=(geom.n_views * geom.n_det, h * w))
    return mat.tocsc()


def simulate_counts(sino: Sinogram, i0: float, seed: int) -> CountsSinogram:
    """Beer-Lambert + Poisson: counts ~ Poisson(i0 * exp(-p)), seeded."""
    if not (i0 > 0):
        raise ValueError("i0 must be > 0")
    p = sino.values.astype(np.float64)
    if (p < 0).any():
        idx = int(np.flatnonzero(p.reshape(-1) < 0)[0])
        raise ValueError(f"negative line integral at flat index {idx}")
    rng = np.random.default_rng(seed)
    counts = rng.poisson(i0 * np.exp(-p))
    return CountsSinogram(sino.geometry, counts.astype(np.int64), float(i0))


def counts_to_line_integrals(cs: CountsSinogram, eps_counts: float = 1.0):
    """Log-transform counts to line integrals with count-proportional weights.

    Returns (Sinogram, weights); weights are max(counts, eps_counts), the
    statistical weighting used by the MBIR data term.
    """
    if not (eps_counts >= 1):
        raise ValueError("eps_counts must be >= 1")
    if not (cs.i0 > 0):
        raise ValueError("i0 must be > 0")
    clamped = np.maximum(cs.counts.astype(np.float64), eps_counts)
    p = -np.log(clamped / cs.i0)
    return Sinogram(cs.geometry, p), clamped


# --- CTK1 serialization (kind=3) -------------------------------------------
#
# Geometry block appended after the payload:
#   u32 n_views | u32 n_det | f64 det_spacing | u32 grid_w | u32 grid_h |
#   f64 grid_pixel_size | f64 i0 (0 when the payload is line integrals) |
#   n_views x f64 angles
# Counts payloads are stored as f64 (exact for any realistic photon count).


def sinogram_to_bytes(payload) -> bytes:
    geom = payload.geometry
    if isinstance(payload, CountsSinogram):
        arr = payload.counts.astype(np.float64)
        i0 = payload.i0
        dtype_code = 2
    else:
        arr = payload.values
        i0 = 0.0
        dtype_code = 1 if arr.dtype == np.float32 else 2
    ext = struct.pack("<II", geom.n_views, geom.n_det)
    ext += struct.pack("<d", geom.det_spacing)
    ext += struct.pack("<II", geom.grid[0], geom.grid[1])
    ext += struct.pack("<dd", geom.grid[2], i0)
    ext += geom.angles.astype("<f8").tobytes()
    return payload_bytes(KIND_SINOGRAM, dtype_code, arr.shape, geom.grid[2], 0.0,
                         arr, extra=ext)


def sinogram_from_reader(r: ByteReader, dtype_code: int, extents):
    from .core import read_array

    if len(extents) != 2:
        raise ContainerError(DIM_OVERFLOW, f"sinogram kind expects 2 dims, got {len(extents)}")
    arr = read_array(r, dtype_code, extents)
    n_views, n_det = r.unpack("<II")
    (det_spacing,) = r.unpack("<d")
    grid_w, grid_h = r.unpack("<II")
    grid_ps, i0 = r.unpack("<dd")
    angles = np.frombuffer(r.take(8 * n_views), dtype="<f8").copy()
    geom = Geometry(n_views, angles, n_det, det_spacing, (grid_w, grid_h, grid_ps))
    if i0 > 0:
        return CountsSinogram(geom, arr.astype(np.int64), i0)
    return Sinogram(geom, arr)

"""Shared image/volume/tensor types, HU conversions, and the CTK1 container format.

Conventions used throughout the package:
  * grids are row-major, indexed [row (y), column (x)]
  * pixel (i, j) has its center at ((j - (W-1)/2) * pixel_size, (i - (H-1)/2) * pixel_size),
    i.e. the image is centered on the isocenter
  * images in Hounsfield units use float32 storage; float64 arrays are accepted
    for verification work
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

# Container error codes
BAD_MAGIC = "bad_magic"
BAD_VERSION = "bad_version"
BAD_KIND = "bad_kind"
BAD_DTYPE = "bad_dtype"
TRUNCATED = "truncated"
DIM_OVERFLOW = "dim_overflow"


class ContainerError(Exception):
    """Raised for malformed CTK1 files; carries a machine-readable ``code``."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


class NumericalError(Exception):
    """Raised when an algorithm produced non-finite values or diverged."""


def _as_float_grid(values, name: str) -> np.ndarray:
    arr = np.asarray(values)
    if arr.dtype == np.float64:
        arr = arr.astype(np.float64, copy=True)
    else:
        arr = arr.astype(np.float32, copy=True)
    bad = ~np.isfinite(arr)
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise ValueError(f"{name}: non-finite value at flat index {idx}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Image2D:
    """A single axial slice on the reconstruction grid.

    ``values`` is (height, width); units are HU for display images and 1/mm for
    attenuation images (which stage of the pipeline owns the array decides).
    """

    values: np.ndarray
    pixel_size: float  # mm

    def __post_init__(self):
        arr = _as_float_grid(self.values, "Image2D.values")
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"Image2D.values must be 2-D and non-empty, got shape {arr.shape}")
        if not (self.pixel_size > 0):
            raise ValueError(f"pixel_size must be > 0, got {self.pixel_size}")
        object.__setattr__(self, "values", arr)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class SliceStack:
    """An ordered stack of slices sharing one grid."""

    slices: tuple
    slice_spacing: float  # mm

    def __post_init__(self):
        slices = tuple(self.slices)
        if len(slices) < 1:
            raise ValueError("SliceStack needs at least one slice")
        first = slices[0]
        for s in slices[1:]:
            if s.values.shape != first.values.shape or s.pixel_size != first.pixel_size:
                raise ValueError("all slices must share width/height/pixel_size")
        if not (self.slice_spacing > 0):
            raise ValueError(f"slice_spacing must be > 0, got {self.slice_spacing}")
        object.__setattr__(self, "slices", slices)

    @property
    def n_slices(self) -> int:
        return len(self.slices)

    @property
    def pixel_size(self) -> float:
        return self.slices[0].pixel_size

    def to_array(self) -> np.ndarray:
        """(n_slices, H, W) array view of the stack."""
        return np.stack([s.values for s in self.slices])


@dataclass(frozen=True, eq=False)
class RoiSpec:
    """Region of interest: ``rect`` (x0, y0, w, h) or ``circle`` (cx, cy, r), pixels."""

    shape: str
    params: tuple

    def __post_init__(self):
        if self.shape not in ("rect", "circle"):
            raise ValueError(f"unknown ROI shape {self.shape!r}")
        p = tuple(float(v) for v in self.params)
        if self.shape == "rect":
            if len(p) != 4:
                raise ValueError("rect ROI needs (x0, y0, w, h)")
            if p[2] < 1 or p[3] < 1:
                raise ValueError("rect ROI needs w >= 1 and h >= 1")
            if p[2] * p[3] < 4:
                raise ValueError("rect ROI area must be >= 4 pixels")
        else:
            if len(p) != 3:
                raise ValueError("circle ROI needs (cx, cy, r)")
            if p[2] <= 0:
                raise ValueError("circle ROI needs r > 0")
        object.__setattr__(self, "params", p)

    def _param(self, index, want):
        if self.shape != want:
            raise ValueError(f"{self.shape} ROI has no such field")
        return self.params[index]

    @property
    def x0(self):
        return self._param(0, "rect")

    @property
    def y0(self):
        return self._param(1, "rect")

    @property
    def w(self):
        return self._param(2, "rect")

    @property
    def h(self):
        return self._param(3, "rect")


@dataclass(frozen=True, eq=False)
class Tensor:
    """Shape + row-major data carrier for network weights and activations."""

    shape: tuple
    data: np.ndarray

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        arr = _as_float_grid(self.data, "Tensor.data").reshape(-1)
        if int(np.prod(shape, dtype=np.int64)) != arr.size:
            raise ValueError(f"shape {shape} does not match data length {arr.size}")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", arr)

    def to_array(self) -> np.ndarray:
        return self.data.reshape(self.shape)


MU_WATER_DEFAULT = 0.02  # 1/mm, approximately water at 70 keV


def hu_to_mu(img: Image2D, mu_water: float = MU_WATER_DEFAULT) -> Image2D:
    """Convert HU to linear attenuation: mu = mu_water * (1 + HU/1000)."""
    if not (mu_water > 0):
        raise ValueError(f"mu_water must be > 0, got {mu_water}")
    mu = mu_water * (1.0 + img.values / 1000.0)
    return Image2D(mu, img.pixel_size)


def mu_to_hu(img: Image2D, mu_water: float = MU_WATER_DEFAULT) -> Image2D:
    """Exact inverse of :func:`hu_to_mu`."""
    if not (mu_water > 0):
        raise ValueError(f"mu_water must be > 0, got {mu_water}")
    hu = 1000.0 * (img.values / mu_water - 1.0)
    return Image2D(hu, img.pixel_size)


def extract_roi(img: Image2D, roi: RoiSpec) -> np.ndarray:
    """Pixel values whose centers fall inside the ROI, in row-major order."""
    h, w = img.values.shape
    if roi.shape == "rect":
        x0, y0, rw, rh = roi.params
        x0i, y0i, rwi, rhi = int(x0), int(y0), int(rw), int(rh)
        if x0i < 0 or y0i < 0 or x0i + rwi > w or y0i + rhi > h:
            raise ValueError(f"rect ROI {roi.params} outside {w}x{h} image")
        return img.values[y0i : y0i + rhi, x0i : x0i + rwi].reshape(-1).copy()
    cx, cy, r = roi.params
    if cx - r < -0.5 or cy - r < -0.5 or cx + r > w - 0.5 or cy + r > h - 0.5:
        raise ValueError(f"circle ROI {roi.params} outside {w}x{h} image")
    yy, xx = np.mgrid[0:h, 0:w]
    mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if not mask.any():
        raise ValueError(f"circle ROI {roi.params} contains no pixel centers")
    return img.values[mask].copy()


# ---------------------------------------------------------------------------
# CTK1 container format
#
#   magic "CTK1" | u16 version=1 | u8 kind | u8 dtype | u32 ndim |
#   ndim x u32 extents | f64 pixel_size_mm | f64 slice_spacing_mm | payload
#
# kind: 1=image 2=stack 3=sinogram 4=tensor;   dtype: 1=f32 2=f64.
# All multi-byte fields little-endian, payload row-major.  Sinogram files carry
# a geometry block after the payload (see projector.py for its layout).
# ---------------------------------------------------------------------------

MAGIC = b"CTK1"
VERSION = 1
KIND_IMAGE, KIND_STACK, KIND_SINOGRAM, KIND_TENSOR = 1, 2, 3, 4
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_MAX_NDIM = 8
_MAX_EXTENT = 2**31
_MAX_ELEMS = 2**33


def _dtype_code(arr: np.ndarray) -> int:
    if arr.dtype == np.float32:
        return 1
    if arr.dtype == np.float64:
        return 2
    raise ValueError(f"unsupported dtype {arr.dtype}")


def pack_header(kind: int, dtype_code: int, extents, pixel_size: float, slice_spacing: float) -> bytes:
    head = MAGIC + struct.pack("<HBB", VERSION, kind, dtype_code)
    head += struct.pack("<I", len(extents))
    head += struct.pack(f"<{len(extents)}I", *extents)
    head += struct.pack("<dd", pixel_size, slice_spacing)
    return head


def payload_bytes(kind: int, dtype_code: int, extents, pixel_size: float,
                  slice_spacing: float, arr: np.ndarray, extra: bytes = b"") -> bytes:
    data = np.ascontiguousarray(arr, dtype=_DTYPE_CODES[dtype_code]).tobytes()
    return pack_header(kind, dtype_code, extents, pixel_size, slice_spacing) + data + extra


def write_container(path, payload) -> None:
    """Serialize Image2D / SliceStack / sinogram types / Tensor to ``path``.

    Sinogram payloads are dispatched through projector.sinogram_to_bytes so
    this module stays free of geometry details.
    """
    blob = container_to_bytes(payload)
    with open(path, "wb") as f:
        f.write(blob)


def container_to_bytes(payload) -> bytes:
    if isinstance(payload, Image2D):
        ext = payload.values.shape
        return payload_bytes(KIND_IMAGE, _dtype_code(payload.values), ext,
                             payload.pixel_size, 0.0, payload.values)
    if isinstance(payload, SliceStack):
        arr = payload.to_array()
        return payload_bytes(KIND_STACK, _dtype_code(arr), arr.shape,
                             payload.pixel_size, payload.slice_spacing, arr)
    if isinstance(payload, Tensor):
        return payload_bytes(KIND_TENSOR, _dtype_code(payload.data), payload.shape,
                             0.0, 0.0, payload.data)
    # sinogram kinds live in projector.py; late import avoids a cycle
    from . import projector

    if isinstance(payload, (projector.Sinogram, projector.CountsSinogram)):
        return projector.sinogram_to_bytes(payload)
    raise ValueError(f"cannot serialize object of type {type(payload).__name__}")


def read_container(path):
    """Read a CTK1 file back into the payload object that produced it."""
    with open(path, "rb") as f:
        blob = f.read()
    return container_from_bytes(blob)


class ByteReader:
    """Cursor over a byte blob that raises TRUNCATED on short reads."""

    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise ContainerError(TRUNCATED, f"needed {n} bytes at offset {self.pos}, "
                                            f"file has {len(self.blob)}")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def remaining(self) -> int:
        return len(self.blob) - self.pos


def read_header(r: ByteReader):
    # a file too short to even hold the magic is "not a CTK1 file", not truncated
    if r.remaining() < 4 or r.take(4) != MAGIC:
        raise ContainerError(BAD_MAGIC, "not a CTK1 file")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise ContainerError(BAD_VERSION, f"unsupported version {version}")
    kind, dtype_code = r.unpack("<BB")
    if kind not in (KIND_IMAGE, KIND_STACK, KIND_SINOGRAM, KIND_TENSOR):
        raise ContainerError(BAD_KIND, f"unknown kind code {kind}")
    if dtype_code not in _DTYPE_CODES:
        raise ContainerError(BAD_DTYPE, f"unknown dtype code {dtype_code}")
    (ndim,) = r.unpack("<I")
    if ndim < 1 or ndim > _MAX_NDIM:
        raise ContainerError(DIM_OVERFLOW, f"ndim {ndim} outside [1, {_MAX_NDIM}]")
    extents = r.unpack(f"<{ndim}I")
    n_elems = 1
    for e in extents:
        if e < 1 or e > _MAX_EXTENT:
            raise ContainerError(DIM_OVERFLOW, f"extent {e} outside [1, {_MAX_EXTENT}]")
        n_elems *= e
        if n_elems > _MAX_ELEMS:
            raise ContainerError(DIM_OVERFLOW, f"element count exceeds {_MAX_ELEMS}")
    pixel_size, slice_spacing = r.unpack("<dd")
    return kind, dtype_code, extents, pixel_size, slice_spacing


def read_array(r: ByteReader, dtype_code: int, extents) -> np.ndarray:
    dt = _DTYPE_CODES[dtype_code]
    n = int(np.prod(extents, dtype=np.int64))
    raw = r.take(n * dt.itemsize)
    return np.frombuffer(raw, dtype=dt).reshape(extents).copy()


def container_from_bytes(blob: bytes):
    r = ByteReader(blob)
    kind, dtype_code, extents, pixel_size, slice_spacing = read_header(r)
    if kind == KIND_SINOGRAM:
        from . import projector

        return projector.sinogram_from_reader(r, dtype_code, extents)
    arr = read_array(r, dtype_code, extents)
    if kind == KIND_IMAGE:
        if len(extents) != 2:
            raise ContainerError(DIM_OVERFLOW, f"image kind expects 2 dims, got {len(extents)}")
        return Image2D(arr, pixel_size)
    if kind == KIND_STACK:
        if len(extents) != 3:
            raise ContainerError(DIM_OVERFLOW, f"stack kind expects 3 dims, got {len(extents)}")
        return SliceStack(tuple(Image2D(a, pixel_size) for a in arr), slice_spacing)
    return Tensor(extents, arr.reshape(-1))

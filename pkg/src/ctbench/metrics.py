"""Evaluation suite: PSNR, ROI statistics, profiles, difference images, NPS.

All statistics work in HU.  PSNR uses a fixed, configurable data range
(default 2000 HU) rather than a per-image range; absolute dB values are
therefore only comparable within this package, while orderings between
methods are meaningful.  The noise power spectrum is estimated from
overlapping patches of a uniform rectangular region: each patch is
detrended, the periodogram (dx*dy/N^2)*|DFT2|^2 is averaged over patches,
and the 1D profile averages the 2D map over annular frequency bins of
equal width up to the Nyquist frequency.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Image2D, RoiSpec, extract_roi

PSNR_CAP_DB = 200.0

METHOD_LABELS = ("MBIR", "FBP", "DL-MBIR_1", "DL-MBIR_3", "DL-MBIR_5")

DETRENDS = ("mean", "plane")


def _values(img):
    return img.values if isinstance(img, Image2D) else np.asarray(img)


def psnr(img, ref, data_range_hu=2000.0):
    """20*log10(data_range / RMSE), capped at +200 dB for identical inputs."""
    a = _values(img).astype(np.float64)
    b = _values(ref).astype(np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not data_range_hu > 0:
        raise ValueError(f"data_range_hu must be > 0, got {data_range_hu}")
    rmse = np.sqrt(np.mean((a - b) ** 2))
    if rmse == 0.0:
        return PSNR_CAP_DB
    return float(min(20.0 * np.log10(data_range_hu / rmse), PSNR_CAP_DB))


def roi_stats(img, roi):
    """Sample mean and (n-1)-denominator std over the ROI pixels."""
    vals = extract_roi(img, roi).astype(np.float64)
    if vals.size < 4:
        raise ValueError(f"ROI covers {vals.size} px, need at least 4")
    return float(vals.mean()), float(vals.std(ddof=1))


def line_profile(img, row_index, x_start, x_end):
    """Horizontal profile (positions in mm, values in HU), left to right."""
    if not isinstance(img, Image2D):
        raise TypeError("img must be an Image2D")
    h, w = img.values.shape
    if not (0 <= row_index < h):
        raise ValueError(f"row_index {row_index} outside image of height {h}")
    if not (0 <= x_start <= x_end < w):
        raise ValueError(
            f"segment [{x_start}, {x_end}] outside image of width {w}"
        )
    cols = np.arange(x_start, x_end + 1)
    positions = (cols - (w - 1) / 2.0) * img.pixel_size
    return positions.astype(np.float64), img.values[row_index, cols].astype(np.float64)


def difference_image(img, ref):
    """img - ref as a new image; antisymmetric by construction."""
    a, b = _values(img), _values(ref)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    pixel = img.pixel_size if isinstance(img, Image2D) else ref.pixel_size
    if isinstance(img, Image2D) and isinstance(ref, Image2D):
        if img.pixel_size != ref.pixel_size:
            raise ValueError("pixel sizes differ")
    return Image2D((a.astype(np.float64) - b.astype(np.float64)).astype(a.dtype), pixel)


@dataclass(frozen=True, eq=False)
class NpsParams:
    """Patch tiling and detrending for NPS estimation over a uniform ROI."""

    roi: RoiSpec
    patch_size: int = 16
    stride: int = 4
    detrend: str = "mean"

    def __post_init__(self):
        n = self.patch_size
        if not isinstance(n, (int, np.integer)) or n < 2 or (n & (n - 1)) != 0:
            raise ValueError(f"patch_size must be a power of two >= 2, got {n!r}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.detrend not in DETRENDS:
            raise ValueError(f"detrend must be one of {DETRENDS}, got {self.detrend!r}")
        if self.roi.shape != "rect":
            raise ValueError("NPS requires a rectangular uniform ROI")
        if self.roi.w < n or self.roi.h < n:
            raise ValueError(
                f"patch {n} px does not fit in ROI {self.roi.w}x{self.roi.h}"
            )

    def n_patches(self):
        nx = (self.roi.w - self.patch_size) // self.stride + 1
        ny = (self.roi.h - self.patch_size) // self.stride + 1
        return nx * ny


@dataclass(frozen=True, eq=False)
class Nps2d:
    """Averaged 2D periodogram in DFT layout (DC at [0, 0]), HU^2 mm^2."""

    power: np.ndarray
    pixel_size: float
    n_patches: int


@dataclass(frozen=True, eq=False)
class NpsProfile:
    bin_centers: np.ndarray
    power: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.bin_centers, dtype=np.float64)
        if c.size < 1 or np.any(np.diff(c) <= 0):
            raise ValueError("bin_centers must be strictly increasing")
        if np.any(np.asarray(self.power) < 0):
            raise ValueError("power must be non-negative")


def _detrend(patch, mode):
    if mode == "mean":
        return patch - patch.mean()
    n = patch.shape[0]
    ys, xs = np.mgrid[0:n, 0:n]
    basis = np.stack([np.ones(n * n), xs.ravel(), ys.ravel()], axis=1)
    coef, *_ = np.linalg.lstsq(basis, patch.ravel(), rcond=None)
    return patch - (basis @ coef).reshape(n, n)


def collect_patches(img, params):
    """Detrended float64 patches tiled over the ROI with the given stride."""
    roi = params.roi
    x0, y0, w, h = (int(v) for v in roi.params)
    rows, cols = img.values.shape
    if x0 < 0 or y0 < 0 or x0 + w > cols or y0 + h > rows:
        raise ValueError(f"ROI {roi.params} outside image {cols}x{rows}")
    region = img.values[y0 : y0 + h, x0 : x0 + w].astype(np.float64)
    n = params.patch_size
    patches = []
    for y0 in range(0, region.shape[0] - n + 1, params.stride):
        for x0 in range(0, region.shape[1] - n + 1, params.stride):
            patches.append(_detrend(region[y0 : y0 + n, x0 : x0 + n], params.detrend))
    return patches


def nps2d_from_patches(patches, pixel_size):
    """Average periodogram of already detrended patches.

    Normalization is per area, P = (dx*dy/N^2) * |DFT2|^2, which makes
    sum(P)*du*dv equal the mean detrended patch variance exactly.
    """
    if len(patches) < 8:
        raise ValueError(f"only {len(patches)} patches available, need at least 8")
    n = patches[0].shape[0]
    accum = np.zeros((n, n), dtype=np.float64)
    for patch in patches:
        if patch.shape != (n, n):
            raise ValueError("patches must share one square shape")
        spectrum = np.fft.fft2(patch)
        accum += spectrum.real ** 2 + spectrum.imag ** 2
    power = accum * (pixel_size * pixel_size / (n * n)) / len(patches)
    return Nps2d(power=power, pixel_size=float(pixel_size), n_patches=len(patches))


def nps2d(img, params):
    """Average periodogram of detrended uniform-region patches of one image."""
    if not isinstance(img, Image2D):
        raise TypeError("img must be an Image2D")
    return nps2d_from_patches(collect_patches(img, params), img.pixel_size)


def nps_variance(nps_map):
    """sum(P)*du*dv, the variance recovered from the power map."""
    n = nps_map.power.shape[0]
    du = 1.0 / (n * nps_map.pixel_size)
    return float(nps_map.power.sum() * du * du)


def nps_radial(nps_map, n_bins=16):
    """Radial average over equal-width frequency bins up to Nyquist.

    Every non-DC sample with radial frequency <= Nyquist lands in exactly
    one bin (corner samples beyond Nyquist are dropped), so the counts sum
    to the number of such samples.
    """
    if n_bins < 4:
        raise ValueError(f"n_bins must be >= 4, got {n_bins}")
    power = nps_map.power
    n = power.shape[0]
    freqs = np.fft.fftfreq(n, d=nps_map.pixel_size)
    radius = np.hypot(freqs[:, None], freqs[None, :])
    nyquist = 1.0 / (2.0 * nps_map.pixel_size)
    width = nyquist / n_bins
    keep = (radius <= nyquist) & (radius > 0.0)
    idx = np.minimum((radius[keep] / width).astype(np.int64), n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    sums = np.bincount(idx, weights=power[keep], minlength=n_bins)
    out = np.zeros(n_bins, dtype=np.float64)
    nonzero = counts > 0
    out[nonzero] = sums[nonzero] / counts[nonzero]
    centers = (np.arange(n_bins, dtype=np.float64) + 0.5) * width
    return NpsProfile(bin_centers=centers, power=out, counts=counts)


def nps_compare(profiles):
    """L2 distance from each labeled profile to the MBIR profile."""
    if "MBIR" not in profiles:
        raise ValueError("profiles must include an MBIR entry")
    ref = profiles["MBIR"]
    table = {}
    for label, prof in profiles.items():
        if prof.bin_centers.shape != ref.bin_centers.shape or not np.allclose(
            prof.bin_centers, ref.bin_centers
        ):
            raise ValueError(f"profile {label!r} uses different binning")
        table[label] = float(np.linalg.norm(prof.power - ref.power))
    return table


@dataclass(eq=False)
class MetricsReport:
    """Per-slice metric rows plus per-method aggregates.

    Rows are (volume_id, method, slice_index, psnr_db, roi_mean_hu,
    roi_std_hu) with methods drawn from METHOD_LABELS.
    """

    rows: list = field(default_factory=list)

    def add(self, volume_id, method, slice_index, psnr_db, roi_mean_hu, roi_std_hu):
        if method not in METHOD_LABELS:
            raise ValueError(f"unknown method label {method!r}")
        self.rows.append(
            (str(volume_id), method, int(slice_index),
             float(psnr_db), float(roi_mean_hu), float(roi_std_hu))
        )

    def methods(self):
        seen = []
        for row in self.rows:
            if row[1] not in seen:
                seen.append(row[1])
        return seen

    def aggregate(self):
        """Mean psnr/mean/std per method over all rows, in first-seen order."""
        out = {}
        for method in self.methods():
            sel = [r for r in self.rows if r[1] == method]
            out[method] = (
                float(np.mean([r[3] for r in sel])),
                float(np.mean([r[4] for r in sel])),
                float(np.mean([r[5] for r in sel])),
            )
        return out

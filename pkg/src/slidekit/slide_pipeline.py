"""Tissue masking, MPP-aware patch-grid planning, and resampling primitives.

Tiling follows the CLAM recipe: saturation channel in HSV, median filter,
Otsu threshold, small-component removal, then a non-overlapping grid whose
extraction size is chosen so patches correspond to the target MPP once
resized (0.25 MPP slides yield 512-px patches for a 256 @ 0.5 MPP target).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import CropTooLarge, ExtractionTooLarge
from .stain_norm import RgbPatch

DEFAULT_MASK_DOWNSAMPLE = 16
DEFAULT_MEDIAN_RADIUS = 2
DEFAULT_MIN_REGION_AREA = 16
DEFAULT_MIN_TISSUE_FRACTION = 0.5


@dataclass(frozen=True)
class SlideRaster:
    """A single-level RGB raster standing in for a pyramidal WSI."""

    pixels: np.ndarray  # (H, W, 3) uint8
    mpp: float
    name: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.uint8)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"pixels must be (H, W, 3) uint8, got {px.shape}")
        if not self.mpp > 0:
            raise ValueError("mpp must be positive")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class TissueMask:
    """Boolean tissue map at 1/downsample of slide resolution."""

    bits: np.ndarray  # (h, w) bool
    downsample: int

    def __post_init__(self):
        b = np.asarray(self.bits, dtype=bool)
        if b.ndim != 2:
            raise ValueError("bits must be 2-D")
        if self.downsample < 1:
            raise ValueError("downsample must be a positive integer")
        object.__setattr__(self, "bits", b)


@dataclass(frozen=True)
class PatchGrid:
    """Planned non-overlapping tile coordinates for one slide."""

    extraction_size: int
    coords: tuple  # ((x, y), ...) top-left corners, row-major order
    target_mpp: float
    target_size: int
    min_tissue_fraction: float


def round_half_away(x: float) -> int:
    """Round half away from zero; pinned for extraction-size arithmetic."""
    return int(np.floor(abs(x) + 0.5) * np.sign(x)) if x else 0


def otsu_threshold(histogram: np.ndarray) -> int:
    """Otsu's threshold over a 256-bin histogram.

    Values <= t form the low class. Candidates where either class is
    empty are excluded; ties break toward the smallest threshold. If all
    mass sits in one bin there is no valid split and that bin is returned.
    """
    hist = np.asarray(histogram, dtype=np.float64)
    if hist.shape != (256,) or np.any(hist < 0):
        raise ValueError("histogram must be 256 non-negative counts")
    total = hist.sum()
    if total <= 0:
        raise ValueError("histogram is empty")
    levels = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(hist)
    w1 = total - w0
    sum0 = np.cumsum(hist * levels)
    sum_all = sum0[-1]
    valid = (w0 > 0) & (w1 > 0)
    if not valid.any():
        return int(np.nonzero(hist)[0][0])
    mu0 = np.divide(sum0, w0, out=np.zeros(256), where=w0 > 0)
    mu1 = np.divide(sum_all - sum0, w1, out=np.zeros(256), where=w1 > 0)
    between = np.where(valid, w0 * w1 * (mu0 - mu1) ** 2, -np.inf)
    return int(np.argmax(between))  # argmax takes the first (smallest) maximizer


def _saturation(rgb: np.ndarray) -> np.ndarray:
    """HSV saturation channel of an 8-bit RGB array, in [0, 1]."""
    f = rgb.astype(np.float64)
    mx = f.max(axis=2)
    mn = f.min(axis=2)
    return np.divide(mx - mn, mx, out=np.zeros_like(mx), where=mx > 0)


def compute_tissue_mask(slide: SlideRaster,
                        median_radius: int = DEFAULT_MEDIAN_RADIUS,
                        min_region_area: int = DEFAULT_MIN_REGION_AREA,
                        downsample: int = DEFAULT_MASK_DOWNSAMPLE) -> TissueMask:
    """Saturation/Otsu tissue mask with small-component removal.

    The slide is stride-subsampled by ``downsample`` first; the median
    filter radius and area threshold are in mask pixels. 4-connectivity.
    """
    ds = max(1, min(downsample, slide.width, slide.height))
    sub = slide.pixels[::ds, ::ds, :]
    sat = _saturation(sub)
    if median_radius > 0:
        sat = ndimage.median_filter(sat, size=2 * median_radius + 1, mode="nearest")
    quant = np.clip(np.floor(sat * 255.0 + 0.5), 0, 255).astype(np.int64)
    hist = np.bincount(quant.ravel(), minlength=256)[:256]
    thresh = otsu_threshold(hist)
    mask = quant > thresh
    if min_region_area > 0 and mask.any():
        structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
        labels, n = ndimage.label(mask, structure=structure)
        if n:
            areas = np.bincount(labels.ravel())
            small = np.nonzero(areas < min_region_area)[0]
            mask &= ~np.isin(labels, small[small > 0])
    return TissueMask(bits=mask, downsample=ds)


def tissue_fraction(mask: TissueMask, x: int, y: int, size: int) -> float:
    """Fraction of tissue mask bits covered by a slide-space square."""
    ds = mask.downsample
    x0 = x // ds
    y0 = y // ds
    x1 = -(-(x + size) // ds)  # ceil division
    y1 = -(-(y + size) // ds)
    region = mask.bits[y0:min(y1, mask.bits.shape[0]), x0:min(x1, mask.bits.shape[1])]
    if region.size == 0:
        return 0.0
    return float(region.mean())


def plan_patch_grid(slide: SlideRaster, target_mpp: float, target_size: int,
                    mask: TissueMask,
                    min_tissue_fraction: float = DEFAULT_MIN_TISSUE_FRACTION) -> PatchGrid:
    """Plan a stride = extraction-size grid of tissue-bearing tiles.

    extraction_size = round(target_size * target_mpp / slide.mpp), so that
    extracted tiles match target_size pixels at target_mpp after resizing.
    Grid origin is (0, 0); right/bottom remainders are dropped.
    """
    if not target_mpp > 0 or target_size < 1:
        raise ValueError("target_mpp must be positive and target_size >= 1")
    extraction_size = round_half_away(target_size * target_mpp / slide.mpp)
    if extraction_size > slide.width or extraction_size > slide.height:
        raise ExtractionTooLarge(
            f"extraction size {extraction_size} exceeds slide "
            f"{slide.width}x{slide.height}"
        )
    coords = []
    for y in range(0, slide.height - extraction_size + 1, extraction_size):
        for x in range(0, slide.width - extraction_size + 1, extraction_size):
            if tissue_fraction(mask, x, y, extraction_size) >= min_tissue_fraction:
                coords.append((x, y))
    return PatchGrid(
        extraction_size=extraction_size,
        coords=tuple(coords),
        target_mpp=target_mpp,
        target_size=target_size,
        min_tissue_fraction=min_tissue_fraction,
    )


def extract_patches(slide: SlideRaster, grid: PatchGrid) -> list[RgbPatch]:
    """Pixel-exact crops at grid coordinates; mpp inherited from the slide."""
    size = grid.extraction_size
    out = []
    for x, y in grid.coords:
        if x + size > slide.width or y + size > slide.height:
            raise ValueError(f"coordinate ({x}, {y}) not fully inside the slide")
        out.append(RgbPatch(pixels=slide.pixels[y:y + size, x:x + size].copy(),
                            mpp=slide.mpp))
    return out


def bilinear_resize_array(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel-centered sampling, float output.

    Works on (H, W) or (H, W, C) float arrays; channels are independent.
    """
    in_h, in_w = arr.shape[0], arr.shape[1]
    if out_h < 1 or out_w < 1:
        raise ValueError("output dimensions must be >= 1")
    if out_h == in_h and out_w == in_w:
        return arr.astype(np.float64, copy=True)
    ys = np.clip((np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5, 0, in_h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5, 0, in_w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    a = arr.astype(np.float64)
    if a.ndim == 3:
        wy = wy[..., None]
        wx = wx[..., None]
    top = a[y0][:, x0] * (1 - wx) + a[y0][:, x1] * wx
    bot = a[y1][:, x0] * (1 - wx) + a[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def resize_bilinear(patch: RgbPatch, out_w: int, out_h: int) -> RgbPatch:
    """Bilinear resize of an 8-bit patch; mpp scales by in_w / out_w."""
    res = bilinear_resize_array(patch.pixels, out_h, out_w)
    px = np.clip(np.floor(res + 0.5), 0, 255).astype(np.uint8)
    mpp = patch.mpp * (patch.width / out_w) if patch.mpp is not None else None
    return RgbPatch(pixels=px, mpp=mpp)


def center_crop(patch: RgbPatch, out_w: int, out_h: int) -> RgbPatch:
    """Centered crop with floor((in - out) / 2) offsets."""
    if out_w > patch.width or out_h > patch.height:
        raise CropTooLarge(
            f"crop {out_w}x{out_h} exceeds input {patch.width}x{patch.height}"
        )
    ox = (patch.width - out_w) // 2
    oy = (patch.height - out_h) // 2
    return RgbPatch(pixels=patch.pixels[oy:oy + out_h, ox:ox + out_w].copy(),
                    mpp=patch.mpp)


def mpp_histogram(slide_stats: list[tuple[float, int]],
                  bin_width: float = 0.05) -> list[tuple[float, float, int]]:
    """Patch counts per MPP bin from (slide mpp, patch count) pairs.

    Returns (bin_low, bin_high, patch_count) rows, ascending, empty bins
    omitted; bin index = floor(mpp / bin_width).
    """
    if not bin_width > 0:
        raise ValueError("bin width must be positive")
    counts: dict[int, int] = {}
    for mpp, n_patches in slide_stats:
        idx = int(np.floor(mpp / bin_width))
        counts[idx] = counts.get(idx, 0) + int(n_patches)
    return [(i * bin_width, (i + 1) * bin_width, counts[i]) for i in sorted(counts)]

"""Macenko stain deconvolution and normalization.

Pixels are converted to optical density (OD), where H&E stains mix
linearly (Beer-Lambert). The stain basis of an image is estimated from
the extreme angles of the OD point cloud's dominant plane; concentrations
are recovered by least squares and remapped onto a reference basis.

Conventions pinned here for reproducibility:
  io = 255, clamp floor v_min = 1, beta = 0.15, alpha = 1 (percentile),
  pixel filter keeps a pixel iff ALL three OD channels exceed beta,
  percentiles use linear interpolation between order statistics,
  hematoxylin is the extreme vector with the larger red-channel OD.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateStains, InsufficientTissue

DEFAULT_IO = 255.0
DEFAULT_V_MIN = 1.0
DEFAULT_ALPHA = 1.0
DEFAULT_BETA = 0.15
MIN_TISSUE_PIXELS = 20
# second-moment ratio below which the OD cloud is treated as one stain
DEGENERATE_EIGENVALUE_RATIO = 1e-8
MAX_CONCENTRATION_PERCENTILE = 99.0


@dataclass(frozen=True)
class RgbPatch:
    """An H×W×3 8-bit image patch with optional micron-per-pixel metadata."""

    pixels: np.ndarray
    mpp: float | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.uint8)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"pixels must be (H, W, 3) uint8, got shape {px.shape}")
        if self.mpp is not None and not self.mpp > 0:
            raise ValueError(f"mpp must be positive, got {self.mpp}")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class OdImage:
    """Per-channel optical density of a patch: od = -log10(v / io)."""

    od: np.ndarray  # (H, W, 3) float64, non-negative
    io: float = DEFAULT_IO

    def __post_init__(self):
        od = np.asarray(self.od, dtype=np.float64)
        if od.ndim != 3 or od.shape[2] != 3:
            raise ValueError(f"od must be (H, W, 3), got shape {od.shape}")
        if not self.io > 0:
            raise ValueError("io must be positive")
        object.__setattr__(self, "od", od)

    @property
    def height(self) -> int:
        return self.od.shape[0]

    @property
    def width(self) -> int:
        return self.od.shape[1]


@dataclass(frozen=True)
class StainBasis:
    """Unit hematoxylin/eosin OD vectors plus robust per-stain maxima."""

    h_vector: np.ndarray  # (3,) unit, non-negative
    e_vector: np.ndarray  # (3,) unit, non-negative
    max_concentrations: np.ndarray  # (2,) positive

    def __post_init__(self):
        h = np.asarray(self.h_vector, dtype=np.float64)
        e = np.asarray(self.e_vector, dtype=np.float64)
        mc = np.asarray(self.max_concentrations, dtype=np.float64)
        for name, v in (("h_vector", h), ("e_vector", e)):
            if v.shape != (3,):
                raise ValueError(f"{name} must be a 3-vector")
            if abs(np.linalg.norm(v) - 1.0) > 1e-9:
                raise ValueError(f"{name} must have unit norm")
            if np.any(v < 0):
                raise ValueError(f"{name} must be non-negative")
        if mc.shape != (2,) or np.any(mc <= 0):
            raise ValueError("max_concentrations must be 2 positive reals")
        if stain_angle_deg(h, e) < 1.0:
            raise DegenerateStains("stain vectors closer than 1 degree")
        object.__setattr__(self, "h_vector", h)
        object.__setattr__(self, "e_vector", e)
        object.__setattr__(self, "max_concentrations", mc)

    @property
    def matrix(self) -> np.ndarray:
        """3×2 matrix with H and E as columns."""
        return np.stack([self.h_vector, self.e_vector], axis=1)


@dataclass(frozen=True)
class ConcentrationMap:
    """Per-pixel hematoxylin/eosin concentrations, clamped non-negative."""

    conc: np.ndarray  # (H, W, 2) float64, >= 0

    def __post_init__(self):
        c = np.asarray(self.conc, dtype=np.float64)
        if c.ndim != 3 or c.shape[2] != 2:
            raise ValueError(f"conc must be (H, W, 2), got shape {c.shape}")
        object.__setattr__(self, "conc", c)


@dataclass(frozen=True)
class NormalizationTarget:
    """Reference stain basis + transmitted-light intensity for remapping."""

    basis: StainBasis
    io: float = DEFAULT_IO


def stain_angle_deg(a: np.ndarray, b: np.ndarray) -> float:
    """Angle in degrees between two stain vectors."""
    cosang = float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
    return float(np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))))


def rgb_to_od(patch: RgbPatch, io: float = DEFAULT_IO,
              v_min: float = DEFAULT_V_MIN) -> OdImage:
    """Convert 8-bit RGB to optical density: od = -log10(max(v, v_min) / io)."""
    if not io > 0:
        raise ValueError("io must be positive")
    v = np.maximum(patch.pixels.astype(np.float64), v_min)
    return OdImage(od=-np.log10(v / io), io=io)


def od_to_rgb(od: OdImage) -> RgbPatch:
    """Invert optical density: v = round(io * 10^(-od)), clamped to [0, 255].

    Rounding is half-away-from-zero so od=1 at io=255 maps to 26.
    """
    v = od.io * np.power(10.0, -od.od)
    v = np.floor(v + 0.5)
    return RgbPatch(pixels=np.clip(v, 0, 255).astype(np.uint8))


def _dominant_plane(od_pixels: np.ndarray) -> np.ndarray:
    """Two dominant eigenvectors (columns) of the 3×3 OD covariance.

    Deterministic: eigenvalues ascending (np.linalg.eigh on the symmetric
    covariance), each eigenvector's sign fixed so its first nonzero
    component is positive.
    """
    cov = np.cov(od_pixels, rowvar=False)
    eigvals, eigvecs = np.linalg.eigh(cov)
    if eigvals[1] < DEGENERATE_EIGENVALUE_RATIO * eigvals[2]:
        raise DegenerateStains(
            f"second eigenvalue {eigvals[1]:.3e} below "
            f"{DEGENERATE_EIGENVALUE_RATIO:g} x dominant {eigvals[2]:.3e}"
        )
    plane = eigvecs[:, [2, 1]]  # dominant first
    for j in range(2):
        col = plane[:, j]
        nz = np.nonzero(col)[0]
        if nz.size and col[nz[0]] < 0:
            plane[:, j] = -col
    return plane


def _extreme_direction(plane: np.ndarray, angle: float) -> np.ndarray:
    """Map an in-plane angle back to a non-negative unit 3-vector."""
    v = plane[:, 0] * np.cos(angle) + plane[:, 1] * np.sin(angle)
    if v.sum() < 0:
        v = -v
    v = np.clip(v, 0.0, None)
    n = np.linalg.norm(v)
    if n == 0:
        raise DegenerateStains("extreme direction collapsed to zero after clamping")
    return v / n


def estimate_stain_basis(od: OdImage, alpha: float = DEFAULT_ALPHA,
                         beta: float = DEFAULT_BETA) -> StainBasis:
    """Estimate the H&E basis from the extreme angles of the OD plane.

    Keeps pixels with all three OD channels above ``beta``, finds the
    dominant covariance plane, and takes the ``alpha``-th and
    (100-alpha)-th percentile in-plane angles as the stain directions.
    ``max_concentrations`` is the 99th-percentile concentration of the
    full image against the estimated basis.
    """
    if not 0 < alpha < 50:
        raise ValueError("alpha must be a percentile in (0, 50)")
    flat = od.od.reshape(-1, 3)
    tissue = flat[np.all(flat > beta, axis=1)]
    if tissue.shape[0] < MIN_TISSUE_PIXELS:
        raise InsufficientTissue(
            f"{tissue.shape[0]} pixels above OD {beta}; need {MIN_TISSUE_PIXELS}"
        )
    plane = _dominant_plane(tissue)
    proj = tissue @ plane  # (N, 2)
    angles = np.arctan2(proj[:, 1], proj[:, 0])
    lo = np.percentile(angles, alpha)
    hi = np.percentile(angles, 100.0 - alpha)
    v_lo = _extreme_direction(plane, lo)
    v_hi = _extreme_direction(plane, hi)
    # hematoxylin absorbs red most: larger red-channel OD goes first
    if v_lo[0] >= v_hi[0]:
        h_vec, e_vec = v_lo, v_hi
    else:
        h_vec, e_vec = v_hi, v_lo
    provisional = StainBasis(h_vec, e_vec, np.array([1.0, 1.0]))
    conc = solve_concentrations(od, provisional).conc.reshape(-1, 2)
    max_c = np.percentile(conc, MAX_CONCENTRATION_PERCENTILE, axis=0)
    max_c = np.maximum(max_c, 1e-8)
    return StainBasis(h_vec, e_vec, max_c)


def solve_concentrations(od: OdImage, basis: StainBasis) -> ConcentrationMap:
    """Per-pixel least-squares unmixing against the basis, clamped at 0."""
    m = basis.matrix
    s = np.linalg.svd(m, compute_uv=False)
    if s[-1] < 1e-8 * s[0]:
        raise DegenerateStains("basis columns are numerically dependent")
    pinv = np.linalg.pinv(m)  # (2, 3)
    flat = od.od.reshape(-1, 3)
    conc = flat @ pinv.T
    conc = np.clip(conc, 0.0, None)
    return ConcentrationMap(conc=conc.reshape(od.od.shape[0], od.od.shape[1], 2))


def normalize_patch(patch: RgbPatch, target: NormalizationTarget,
                    alpha: float = DEFAULT_ALPHA,
                    beta: float = DEFAULT_BETA) -> RgbPatch:
    """Remap a patch onto the target stain basis (Macenko normalization).

    Estimates the source basis, rescales each stain channel by the ratio
    of target to source robust maxima, and reconstructs through the
    target basis. Raises InsufficientTissue / DegenerateStains for
    patches a caller should skip.
    """
    od = rgb_to_od(patch, io=target.io)
    source = estimate_stain_basis(od, alpha=alpha, beta=beta)
    conc = solve_concentrations(od, source).conc
    scale = target.basis.max_concentrations / source.max_concentrations
    od_out = (conc * scale[None, None, :]) @ target.basis.matrix.T
    out = od_to_rgb(OdImage(od=od_out, io=target.io))
    return RgbPatch(pixels=out.pixels, mpp=patch.mpp)


def fit_target(reference: RgbPatch, alpha: float = DEFAULT_ALPHA,
               beta: float = DEFAULT_BETA,
               io: float = DEFAULT_IO) -> NormalizationTarget:
    """Fit a normalization target from a reference patch."""
    basis = estimate_stain_basis(rgb_to_od(reference, io=io), alpha=alpha, beta=beta)
    return NormalizationTarget(basis=basis, io=io)

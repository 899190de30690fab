"""Virtual WSI cohorts with controllable per-slide stain perturbations.

Every slide shares the same procedural tissue-content classes
(textured concentration fields); only its stain basis (tilted by a
per-slide angle) and a per-slide concentration scale differ. The confound is
purely chromatic by construction, which makes the cohort a ground-truth
testbed for source-slide feature collapse.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidSpec
from .stain_norm import OdImage, RgbPatch, od_to_rgb

# synthetic canonical H&E pair; eosin lifted off the red axis so strongly
# eosin-dominated pixels still clear the OD tissue filter in all channels
CANONICAL_H = np.array([0.65, 0.70, 0.29]) / np.linalg.norm([0.65, 0.70, 0.29])
CANONICAL_E = np.array([0.30, 0.85, 0.45]) / np.linalg.norm([0.30, 0.85, 0.45])

BASE_CONCENTRATION = 0.03


@dataclass(frozen=True)
class CohortSpec:
    n_wsis: int = 10
    patches_per_wsi: int = 1000
    patch_size: int = 32
    n_content_classes: int = 4
    stain_perturbation_deg: float = 15.0
    intensity_jitter: tuple = (0.7, 1.3)
    noise_sigma: float = 0.005
    seed: int = 0

    def __post_init__(self):
        if self.n_wsis < 2:
            raise InvalidSpec("need at least 2 WSIs")
        if self.patches_per_wsi < 1 or self.patch_size < 12:
            raise InvalidSpec("patches_per_wsi >= 1 and patch_size >= 12 required")
        if self.n_content_classes < 1:
            raise InvalidSpec("need at least one content class")
        if self.stain_perturbation_deg < 0 or self.noise_sigma < 0:
            raise InvalidSpec("perturbation and noise must be non-negative")
        lo, hi = self.intensity_jitter
        if not 0 < lo <= hi:
            raise InvalidSpec("intensity_jitter must be 0 < lo <= hi")


@dataclass(frozen=True)
class VirtualCohort:
    patches: list  # of RgbPatch
    wsi_ids: np.ndarray  # (n,) int64
    content_classes: np.ndarray  # (n,) int64
    true_bases: list  # per-WSI (h_vector, e_vector) pairs
    spec: CohortSpec

    @property
    def manifest(self) -> dict:
        return {int(w): f"wsi_{int(w):03d}" for w in range(self.spec.n_wsis)}


def perturb_basis(angle_deg: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Tilt each canonical stain vector by exactly angle_deg, re-projected
    to a non-negative unit vector.

    Each vector moves in a random direction orthogonal to itself, so the
    requested perturbation magnitude is realized on every slide (a random
    rotation axis would realize anywhere between 0 and angle_deg).
    """
    theta = np.radians(angle_deg)
    out = []
    for v in (CANONICAL_H, CANONICAL_E):
        u = rng.normal(size=3)
        u -= np.dot(u, v) * v
        u /= np.linalg.norm(u)
        r = np.clip(np.cos(theta) * v + np.sin(theta) * u, 0.0, None)
        out.append(r / np.linalg.norm(r))
    return out[0], out[1]


def _class_params(content_class: int) -> tuple[float, float, float]:
    """(density level, density grain, mix grain) for a content class.

    Classes differ in overall stain density and in the spatial frequency
    of their texture fields; the stain statistics are identical across
    slides by construction.
    """
    density = 0.60 + 0.12 * (content_class % 4)
    density_sigma = 1.5 + 0.5 * (content_class % 3)
    mix_sigma = 0.8 + 0.4 * ((content_class + 1) % 3)
    return density, density_sigma, mix_sigma


def _smooth_noise(size: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Unit-variance Gaussian random field with the given grain."""
    from scipy.ndimage import gaussian_filter

    field = gaussian_filter(rng.normal(size=(size, size)), sigma, mode="wrap")
    return field / field.std()


def render_patch(content_class: int, size: int, h_vec: np.ndarray,
                 e_vec: np.ndarray, scale: float, noise_sigma: float,
                 rng: np.random.Generator, mpp: float = 0.5) -> RgbPatch:
    """One patch: class-specific concentration fields through a stain basis.

    Concentrations factor into a total-density field T and a fine-grained
    H/E mix field M in [0, 1]: c_h = T*M, c_e = T*(1-M). The mix field
    saturates at both ends, so every patch contains near-pure pixels of
    each stain (needed for basis estimation), while its patch-scale
    average stays near 0.5 (texture layout self-averages, color does not).
    """
    density, density_sigma, mix_sigma = _class_params(content_class)
    total = density * (1.0 + 0.45 * _smooth_noise(size, density_sigma, rng))
    total = np.clip(total, 0.05, None)
    mix = np.clip(0.5 + 0.45 * _smooth_noise(size, mix_sigma, rng), 0.0, 1.0)
    c_h = BASE_CONCENTRATION + total * mix
    c_e = BASE_CONCENTRATION + total * (1.0 - mix)
    od = scale * (c_h[..., None] * h_vec + c_e[..., None] * e_vec)
    if noise_sigma > 0:
        od = od + rng.normal(scale=noise_sigma, size=od.shape)
    od = np.clip(od, 0.0, None)
    patch = od_to_rgb(OdImage(od=od))
    return RgbPatch(pixels=patch.pixels, mpp=mpp)


def generate_cohort(spec: CohortSpec) -> VirtualCohort:
    """Seeded, deterministic cohort; per-slide and per-patch rng streams."""
    patches, wsi_ids, classes, bases = [], [], [], []
    for w in range(spec.n_wsis):
        slide_rng = np.random.default_rng([spec.seed, w])
        h_vec, e_vec = perturb_basis(spec.stain_perturbation_deg, slide_rng)
        scale = slide_rng.uniform(*spec.intensity_jitter)
        bases.append((h_vec, e_vec))
        for p in range(spec.patches_per_wsi):
            cls = p % spec.n_content_classes
            patch_rng = np.random.default_rng([spec.seed, w, p])
            patches.append(render_patch(cls, spec.patch_size, h_vec, e_vec,
                                        scale, spec.noise_sigma, patch_rng))
            wsi_ids.append(w)
            classes.append(cls)
    return VirtualCohort(
        patches=patches,
        wsi_ids=np.asarray(wsi_ids, dtype=np.int64),
        content_classes=np.asarray(classes, dtype=np.int64),
        true_bases=bases,
        spec=spec,
    )


def reference_patch(size: int = 96, seed: int = 7) -> RgbPatch:
    """A rich two-stain reference on the canonical basis, for target fitting."""
    rng = np.random.default_rng(seed)
    return render_patch(content_class=0, size=size, h_vec=CANONICAL_H,
                        e_vec=CANONICAL_E, scale=1.0, noise_sigma=0.0, rng=rng)


def raw_pixel_features(cohort: VirtualCohort, out_size: int = 8) -> np.ndarray:
    """Downsampled raw pixels as a trivial feature extractor (diagnostics)."""
    from .slide_pipeline import bilinear_resize_array

    rows = [bilinear_resize_array(p.pixels.astype(np.float64) / 255.0,
                                  out_size, out_size).reshape(-1)
            for p in cohort.patches]
    return np.stack(rows)

"""slidekit: histopathology preprocessing and collapse diagnostics.

Macenko stain normalization, MPP-aware whole-slide tiling, a desk-scale
DINO-style self-distillation trainer, and metrics quantifying how much
patch features cluster by their source slide.
"""

from .stain_norm import (
    NormalizationTarget,
    OdImage,
    RgbPatch,
    StainBasis,
    estimate_stain_basis,
    fit_target,
    normalize_patch,
    od_to_rgb,
    rgb_to_od,
    solve_concentrations,
)
from .slide_pipeline import (
    PatchGrid,
    SlideRaster,
    TissueMask,
    center_crop,
    compute_tissue_mask,
    extract_patches,
    mpp_histogram,
    otsu_threshold,
    plan_patch_grid,
    resize_bilinear,
)
from .embed_diag import (
    Embedding2D,
    FeatureSet,
    knn_wsi_purity,
    pca_embed,
    sample_protocol,
    silhouette_wsi,
    tsne_embed,
)
from .mini_dino import (
    DinoConfig,
    EncoderParams,
    TeacherStudentState,
    augment,
    center_update,
    dino_loss,
    ema_update,
    embed_patches,
    encoder_forward,
    lr_schedule,
    train_run,
)
from .linear_probe import (
    LabeledFeatureSet,
    ProbeConfig,
    evaluate_accuracy,
    preprocess_eval,
    train_probe,
)
from .synth_slides import CohortSpec, VirtualCohort, generate_cohort

__version__ = "0.1.0"

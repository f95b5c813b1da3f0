"""Adaptive voxel-weighted segmentation losses, lesion metrics, and phantoms."""

__version__ = "0.1.0"

from .losses import (
    BinWeighting,
    GradCheckReport,
    LOSS_IDS,
    LossConfig,
    LossResult,
    bin_weights,
    dice_focal_loss,
    dice_loss,
    focal_loss,
    grad_check,
    l1_norms,
    l1dfl,
    loss_by_id,
    weighted_dice_loss,
)
from .metrics import (
    ClinicalQuantities,
    DetectionCounts,
    DetectionReport,
    LesionSet,
    SpreadGroups,
    classify_detections,
    clinical_quantities,
    connected_components_18,
    dmax,
    dmax_groups,
    evaluate_detection,
    f1_score,
    lesion_dscs,
    patient_dsc,
    threshold_sweep,
    volume_thresholds,
    wilcoxon_signed_rank_one_tailed,
)
from .optim import (
    FeatureModelResult,
    LogitDescentSegmenter,
    OptimConfig,
    Trajectory,
    TrajectoryRecord,
    VoxelFeatureSegmenter,
    cosine_lr,
    optimize_feature_model,
    optimize_logits,
    split_cohort,
    voxel_features,
)
from .phantom import CohortSpec, PhantomConfig, SphereSpec, cohort, generate
from .validation import GeometryError
from .volume import (
    PatchSpec,
    ScanCase,
    VolumeGrid,
    VvolError,
    clip_normalize_ct,
    make_rng,
    read_vvol,
    resample,
    sample_patch,
    write_vvol,
)

__all__ = [name for name in dir() if not name.startswith("_")]

"""viewseq: order unordered multi-view images into video-like clips for
sequence-aware upsampling, and rebuild a complete high-resolution dataset.

Core pieces:
  - dataset:     pose manifests, camera geometry, PNG I/O
  - resample:    bicubic degradation/restoration (a = -0.5 kernel)
  - orb:         FAST + oriented binary descriptors
  - similarity:  pairwise dissimilarity measures (features and poses)
  - ordering:    greedy chains, threshold-bounded clips, planning, aggregation
  - metrics:     L1 / SSIM / PSNR and the training-loss arithmetic
  - pipeline:    end-to-end orchestration with a pluggable upsampler
"""

from .dataset import (
    CameraPose,
    DatasetError,
    FrameRecord,
    MultiViewSet,
    RasterImage,
    composite_background,
    derive_geometry,
    load_image_png,
    load_pose_manifest,
    save_image_png,
    write_pose_manifest,
)
from .metrics import LossWeights, d_ssim, l1, psnr, render_loss, ssim, subpixel_loss, total_loss
from .orb import DescriptorSet, Keypoint, OrbConfig, detect_fast, extract_orb, orientation, steered_brief, to_grayscale
from .ordering import (
    AggregationError,
    CoverageState,
    MisalignmentReport,
    OrderingConfig,
    Plan,
    Subsequence,
    adaptive_length_subsequences,
    aggregate,
    count_misalignments,
    greedy_order,
    multi_threshold_plan,
)
from .pipeline import PipelineConfig, PipelineError
from .resample import bicubic_resample
from .similarity import (
    Dissimilarity,
    MatchSet,
    MeasureKind,
    ScoreProvider,
    ScoreTable,
    cross_check_match,
    hamming,
    orb_dissimilarity,
    pose_angle_to_origin,
    pose_center_distance,
    pose_direction_angle,
)

__version__ = "0.1.0"

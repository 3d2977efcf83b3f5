"""Few-shot video object segmentation by transductive fitting of per-frame
linear classifiers over pre-extracted features."""

from .classifier import (
    BinaryMask,
    ClassifierBank,
    FrameClassifier,
    binarize,
    imprint_weights,
    init_bias,
    initial_foreground,
    predict,
)
from .episodes import (
    DatasetManifest,
    Episode,
    FeatureSequence,
    SupportSet,
    SyntheticSpec,
    generate_synthetic,
    load_episode,
    load_manifest,
    sample_episode,
    save_episode,
    save_manifest,
)
from .estimator import TransductiveVideoSegmenter
from .losses import (
    LossBreakdown,
    LossWeights,
    Signatures,
    combined_loss,
    compute_signatures,
    dense_contrastive_loss,
    entropy_loss,
    global_prototype,
    kl_loss,
    label_marginal,
    support_cross_entropy,
    temporal_consistency_loss,
)
from .metrics import (
    MetricReport,
    boundary_f,
    center_bias_map,
    compute_report,
    iou,
    kshot_stability,
    video_consistency,
)
from .numerics import (
    cosine_similarity,
    distance_transform,
    finite_difference_gradient,
    normalize,
    normalize_columns,
    sigmoid,
)
from .optimizer import (
    OptimizationTrace,
    TTIConfig,
    build_pseudo_labels,
    loss_weight_schedule,
    run_episode,
    select_keyframe,
    tti_stage1,
    tti_stage2,
)
from .tensorio import read_tensor, write_tensor

__version__ = "0.1.0"

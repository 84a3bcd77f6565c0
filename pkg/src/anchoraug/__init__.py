"""anchoraug: a desk-scale region proposal lab.

Hand-designed anchors are tied to the kernel and dilation of a convolution:
an anchor at feature cell (r, c) covers exactly the taps of an m x n dilated
conv there, so one parameter set serves two interchangeable forward forms. A
convolutional sweep scores and regresses every cell ("augmentation",
gradient-free), and a fully-connected map over RoI-Align patches refines the
surviving boxes ("refinement", the only path that trains).
"""

from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .geometry import (
    Anchor,
    AnchorSpec,
    Box,
    Delta4,
    anchor_aspect_ratio,
    anchor_grid_boxes,
    anchor_scale,
    clip_to_image,
    decode_deltas,
    encode_deltas,
    generate_anchor_grid,
    iou,
    match_quality_matrix,
    nms,
)
from .head import (
    LossConfig,
    RpnHeadParams,
    backward,
    forward_conv,
    forward_fc,
    load_checkpoint,
    loss,
    save_checkpoint,
    sgd_step,
)
from .metrics import (
    AnchorQualityReport,
    RecallReport,
    anchor_separability,
    auc_roc,
    average_recall,
    mean_best_iou,
)
from .pipeline import (
    PipelineConfig,
    ProposalSet,
    Scene,
    anchor_guided_append,
    assign_labels,
    augment,
    em_elbo_diagnostic,
    filter_positive_redundancy,
    infer,
    refine,
    sample_minibatch,
    train_step,
)
from .synthetic import generate_synthetic_scene
from .tensor import (
    ConvWeights,
    FeaturePyramid,
    bilinear_sample,
    conv2d_dilated,
    fc_apply,
    fc_from_conv,
    roi_align,
)

__version__ = "0.1.0"

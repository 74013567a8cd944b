"""handmsff: multi-scale cascaded hand joint detection on single images."""

from .errors import (
    ConfigError,
    ContractViolation,
    FormatError,
    HandMsffError,
    TrainingDiverged,
)
from .evaluation import EvalReport, evaluate, pck, pck_curve, run_ablation, spread
from .graph import SkeletonGraph, build_hand_skeleton, error_reweight, mutual_reinforce
from .localizer import HandCrop, HandRegion, crop_hand, detect_hands_oracle, map_to_source
from .model import (
    HandJointNet,
    ModelConfig,
    decode_joints,
    init_model,
    model_forward,
    parameter_count,
)
from .synth import (
    DatasetManifest,
    GenConfig,
    gaussian_targets,
    generate_dataset,
    load_dataset,
    render_hand,
    sample_hand_pose,
)
from .training import (
    TrainConfig,
    TrainState,
    gradient_check,
    heatmap_mse,
    load_checkpoint,
    msff_weights,
    save_checkpoint,
    total_loss,
    train,
)

__version__ = "0.1.0"

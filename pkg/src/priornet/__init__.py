"""Template-guided medical image segmentation with cosine-similarity attention.

A U-Net whose encoder is paired with a Siamese template encoder; at every
level the per-voxel cosine similarity between the two feature maps gates
the target features before they reach the decoder.
"""

from .data import Dataset, DatasetManifest, Preprocessing, SyntheticSpec, generate_synthetic_dataset, synthesize
from .errors import PriorNetError
from .evaluation import ablation_study, evaluate_dataset, predict_segmentation, template_robustness_study
from .io import read_labelmap, read_volume, write_volume
from .network import (
    NetworkConfig,
    csam_apply,
    csam_weights,
    encoder_forward,
    init_parameters,
    priornet_forward,
    variant_forward,
)
from .objectives import dice_loss, finite_difference_gradcheck, hard_dice_score, soft_dice_loss
from .training import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train_loop
from .volume import (
    LabelMap,
    TemplateBundle,
    Volume,
    center_crop,
    extract_foreground_regions,
    normalize_zscore,
    one_hot_encode,
    truncate_intensity,
)

__version__ = "0.1.0"

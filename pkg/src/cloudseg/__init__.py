"""Cloud and cloud-shadow segmentation for multiband rasters.

A from-scratch numpy implementation of a symmetric encoder-decoder
segmentation network with multi-scale feature fusion, together with its
training loop, tiled whole-scene inference, evaluation metrics, and a
deterministic synthetic-scene generator for desk-scale experiments.
"""

from .checkpoint import load_params, save_params
from .layers import BNParams, ConvParams, mse_loss
from .metrics import ConfusionCounts, confusion, f_score, iou, mean_iou, metric_report
from .network import (
    GradStore,
    ModelParams,
    NetworkConfig,
    build_model,
    count_parameters,
    model_backward,
    model_forward,
    receptive_field,
)
from .pipeline import (
    InferenceConfig,
    MaskRaster,
    RasterImage,
    binarize,
    linear_stretch,
    merge_masks,
    normalize_max,
    predict_image,
    stitch_max,
    tile_plan,
)
from .synthetic import SceneSpec, generate_dataset, generate_scene
from .training import TrainConfig, clip_gradients, poly_lr, sgd_step, train

__version__ = "0.1.0"

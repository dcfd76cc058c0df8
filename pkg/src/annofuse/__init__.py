"""annofuse: annotation-guided latent grids fused into a two-stage
detector's feature pyramid, with a desk-scale training and evaluation
harness."""

__version__ = "0.1.0"

from .dataset import (
    AnnotationVector,
    Patch,
    Scene,
    SceneGeneratorConfig,
    SplitSpec,
    compute_annotation,
    generate_synthetic_scenes,
    load_manifest,
    save_manifest,
    stratified_split,
    tile_scene,
)
from .embedding import (
    AnnotationWeights,
    EncoderState,
    annotation_distance,
    dtl_loss,
    encode,
    encode_batch,
    matl_loss,
    mine_triplets,
    train_embedding,
)
from .evaluation import MetricsReport, fit_pca, iou, map50, match_detections, roc_auc
from .fusion import FusionConfig, FusionParams, PyramidFeatures, augment_pyramid
from .latentgrid import LatentGrid, ResampleSpec, extract_grid, grid_shape, resample_grid

__all__ = [
    "AnnotationVector",
    "AnnotationWeights",
    "EncoderState",
    "FusionConfig",
    "FusionParams",
    "LatentGrid",
    "MetricsReport",
    "Patch",
    "PyramidFeatures",
    "ResampleSpec",
    "Scene",
    "SceneGeneratorConfig",
    "SplitSpec",
    "annotation_distance",
    "augment_pyramid",
    "compute_annotation",
    "dtl_loss",
    "encode",
    "encode_batch",
    "extract_grid",
    "fit_pca",
    "generate_synthetic_scenes",
    "grid_shape",
    "iou",
    "load_manifest",
    "map50",
    "match_detections",
    "matl_loss",
    "mine_triplets",
    "resample_grid",
    "roc_auc",
    "save_manifest",
    "stratified_split",
    "tile_scene",
    "train_embedding",
]

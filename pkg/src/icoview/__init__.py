"""Multi-view learning on spherical surface data.

Per-vertex scalar features living on a sphere mesh are rendered into
multi-channel images from the 12 icosahedron viewpoints, encoded by a small
convolutional network, fused across views with attention pooling, and mapped
to a joint output: a continuous age estimate plus a binned-age class
distribution.

The library is organized by pipeline stage:

- :mod:`icoview.geometry` — icospheres, mesh validation, OBJ/CSV I/O
- :mod:`icoview.render` — cameras, software rasterizer, feature shading
- :mod:`icoview.data` — manifests, binning, class weights, augmentation
- :mod:`icoview.model` — encoder, attention pooling, joint head, gradients
- :mod:`icoview.train` — Adam, early stopping, the training loop, prediction
- :mod:`icoview.cli` — the ``icoview`` command-line entry point
"""

from .data import (
    AugmentConfig,
    BinningScheme,
    ClassWeights,
    SubjectRecord,
    assign_bin,
    augment,
    class_weights,
    load_bundle,
    load_manifest,
    synth_dataset,
)
from .geometry import (
    TriangleMesh,
    attach_features,
    icosahedron,
    icosphere,
    read_features_csv,
    read_obj,
    subdivide,
    validate_mesh,
    write_features_csv,
    write_obj,
)
from .model import (
    AttentionPool,
    EncoderConfig,
    JointHead,
    LossConfig,
    ParameterStore,
    attention_pool,
    backward,
    batch_loss,
    encoder_forward,
    forward_batch,
    head_forward,
    init_params,
    load_checkpoint,
    loss,
    save_checkpoint,
)
from .render import (
    Camera,
    FragmentMap,
    ViewStack,
    camera_rig,
    load_mvr,
    rasterize,
    render_views,
    save_mvr,
    save_view_pngs,
    shade_features,
)
from .train import (
    AdamState,
    EarlyStopping,
    FitResult,
    TrainConfig,
    adam_step,
    fit,
    load_checkpoint_for_predict,
    predict_ga,
    train_epoch,
    validate,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "AttentionPool",
    "AugmentConfig",
    "BinningScheme",
    "Camera",
    "ClassWeights",
    "EarlyStopping",
    "EncoderConfig",
    "FitResult",
    "FragmentMap",
    "JointHead",
    "LossConfig",
    "ParameterStore",
    "SubjectRecord",
    "TrainConfig",
    "TriangleMesh",
    "ViewStack",
    "adam_step",
    "assign_bin",
    "attach_features",
    "attention_pool",
    "augment",
    "backward",
    "batch_loss",
    "camera_rig",
    "class_weights",
    "encoder_forward",
    "fit",
    "forward_batch",
    "head_forward",
    "icosahedron",
    "icosphere",
    "init_params",
    "load_bundle",
    "load_checkpoint",
    "load_checkpoint_for_predict",
    "load_manifest",
    "load_mvr",
    "loss",
    "predict_ga",
    "rasterize",
    "read_features_csv",
    "read_obj",
    "render_views",
    "save_checkpoint",
    "save_mvr",
    "save_view_pngs",
    "shade_features",
    "subdivide",
    "synth_dataset",
    "train_epoch",
    "validate",
    "validate_mesh",
    "write_features_csv",
    "write_obj",
]

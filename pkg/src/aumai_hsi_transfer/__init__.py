"""AumAI HSI Transfer: hyperspectral classification with transfer learning."""

from aumai_hsi_transfer.architectures import (
    build_model,
    cnn_transfer_default,
    published_surgery,
    transfer_surgery,
)
from aumai_hsi_transfer.async_core import AsyncTrainingService
from aumai_hsi_transfer.autodiff_nn import (
    Params,
    adam_step,
    backward,
    count_params,
    forward,
    grad_check,
    init_params,
)
from aumai_hsi_transfer.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from aumai_hsi_transfer.config import RunConfig, load_config
from aumai_hsi_transfer.errors import (
    HsiError,
    classify_exception,
    create_error_response,
    exit_code_for,
)
from aumai_hsi_transfer.linalg_prep import (
    PatchSet,
    PcaModel,
    apply_pca,
    extract_patches,
    fit_pca,
    flatten_patches,
    split_train_test,
)
from aumai_hsi_transfer.models import (
    ModelSpec,
    ModelVariant,
    SplitSpec,
    SurgerySpec,
    SynthSpec,
    TrainConfig,
    VariantName,
)
from aumai_hsi_transfer.scene_io import (
    Scene,
    generate_synthetic_scene,
    load_scene,
    save_scene,
    write_class_map,
)
from aumai_hsi_transfer.train_eval import evaluate, predict_map, train

__version__ = "0.1.0"

__all__ = [
    # Data
    "Scene",
    "SynthSpec",
    "generate_synthetic_scene",
    "load_scene",
    "save_scene",
    "write_class_map",
    # Preprocessing
    "PatchSet",
    "PcaModel",
    "SplitSpec",
    "apply_pca",
    "extract_patches",
    "fit_pca",
    "flatten_patches",
    "split_train_test",
    # Engine
    "ModelSpec",
    "Params",
    "adam_step",
    "backward",
    "count_params",
    "forward",
    "grad_check",
    "init_params",
    "load_checkpoint",
    "read_checkpoint",
    "save_checkpoint",
    # Architectures and transfer
    "ModelVariant",
    "SurgerySpec",
    "VariantName",
    "build_model",
    "cnn_transfer_default",
    "published_surgery",
    "transfer_surgery",
    # Training
    "TrainConfig",
    "evaluate",
    "predict_map",
    "train",
    # Configuration and errors
    "HsiError",
    "RunConfig",
    "classify_exception",
    "create_error_response",
    "exit_code_for",
    "load_config",
    # Async API
    "AsyncTrainingService",
]

"""Pydantic models for aumai-hsi-transfer."""

from __future__ import annotations

import math
from enum import Enum
from typing import Annotated, Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

# ---------------------------------------------------------------------------
# Failure taxonomy records
# ---------------------------------------------------------------------------


class ErrorCategory(str, Enum):
    """Category of a failure; each maps to one CLI exit code."""

    contract = "contract"
    config = "config"
    validation = "validation"
    split = "split"
    label = "label"
    batch = "batch"
    numeric = "numeric"
    divergence = "divergence"
    io = "io"
    format = "format"
    surgery = "surgery"
    dimension = "dimension"
    evaluation = "evaluation"


class ErrorKind(BaseModel):
    """A registered failure kind."""

    category: ErrorCategory
    exit_code: int = Field(description="Process exit code used by the CLI")
    retryable: bool = Field(description="Whether rerunning may succeed")
    description: str

    @field_validator("exit_code")
    @classmethod
    def exit_code_in_range(cls, value: int) -> int:
        if not 0 < value < 126:
            raise ValueError(f"exit_code must be in 1..125, got {value}")
        return value


# ---------------------------------------------------------------------------
# Engine mode
# ---------------------------------------------------------------------------


class Precision(str, Enum):
    f32 = "f32"
    f64 = "f64"


class EngineMode(BaseModel):
    """Numeric precision plus the training/inference switch.

    ``dropout`` lets verification run training-mode batch statistics while
    keeping dropout off.
    """

    model_config = ConfigDict(frozen=True)

    precision: Precision = Precision.f32
    training: bool = False
    dropout: bool = True


# ---------------------------------------------------------------------------
# Layer specs (tagged union on ``kind``)
# ---------------------------------------------------------------------------

Shape = tuple[int, ...]


class _LayerBase(BaseModel):
    model_config = ConfigDict(frozen=True)

    frozen: bool = Field(default=False, description="Excluded from optimizer updates")

    @property
    def parameterized(self) -> bool:
        return False

    def output_shape(self, input_shape: Shape) -> Shape:
        return input_shape


class DenseSpec(_LayerBase):
    kind: Literal["dense"] = "dense"
    in_features: int = Field(gt=0)
    out_features: int = Field(gt=0)

    @property
    def parameterized(self) -> bool:
        return True

    def output_shape(self, input_shape: Shape) -> Shape:
        if input_shape != (self.in_features,):
            raise ValueError(
                f"dense expects input ({self.in_features},), got {input_shape}"
            )
        return (self.out_features,)


class Conv3DSpec(_LayerBase):
    """3D convolution: spectral axis valid, spatial axes "same"."""

    kind: Literal["conv3d"] = "conv3d"
    in_channels: int = Field(gt=0)
    out_channels: int = Field(gt=0)
    k_spec: int = Field(gt=0)
    k_row: Literal[3] = 3
    k_col: Literal[3] = 3

    @property
    def parameterized(self) -> bool:
        return True

    def output_shape(self, input_shape: Shape) -> Shape:
        if len(input_shape) != 4 or input_shape[0] != self.in_channels:
            raise ValueError(
                f"conv3d expects ({self.in_channels}, d, h, w), got {input_shape}"
            )
        _, depth, rows, cols = input_shape
        if depth < self.k_spec:
            raise ValueError(
                f"conv3d spectral depth {depth} is smaller than kernel {self.k_spec}"
            )
        return (self.out_channels, depth - self.k_spec + 1, rows, cols)


class Conv2DSpec(_LayerBase):
    """2D convolution with "same" zero padding."""

    kind: Literal["conv2d"] = "conv2d"
    in_channels: int = Field(gt=0)
    out_channels: int = Field(gt=0)
    k: Literal[3] = 3

    @property
    def parameterized(self) -> bool:
        return True

    def output_shape(self, input_shape: Shape) -> Shape:
        if len(input_shape) != 3 or input_shape[0] != self.in_channels:
            raise ValueError(
                f"conv2d expects ({self.in_channels}, h, w), got {input_shape}"
            )
        return (self.out_channels, input_shape[1], input_shape[2])


class BatchNormSpec(_LayerBase):
    kind: Literal["batchnorm"] = "batchnorm"
    features: int = Field(gt=0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    epsilon: float = Field(default=1e-5, gt=0.0)

    @property
    def parameterized(self) -> bool:
        return True

    def output_shape(self, input_shape: Shape) -> Shape:
        if input_shape != (self.features,):
            raise ValueError(
                f"batchnorm expects ({self.features},), got {input_shape}"
            )
        return input_shape


class DropoutSpec(_LayerBase):
    kind: Literal["dropout"] = "dropout"
    rate: float = Field(ge=0.0, lt=1.0)


class ActivationFn(str, Enum):
    relu = "relu"
    leaky_relu = "leaky_relu"
    softmax = "softmax"


class ActivationSpec(_LayerBase):
    kind: Literal["activation"] = "activation"
    fn: ActivationFn
    alpha: float = Field(default=0.01, ge=0.0, description="LeakyReLU slope")

    def output_shape(self, input_shape: Shape) -> Shape:
        if self.fn is ActivationFn.softmax and len(input_shape) != 1:
            raise ValueError(f"softmax expects a flat input, got {input_shape}")
        return input_shape


class FlattenSpec(_LayerBase):
    kind: Literal["flatten"] = "flatten"

    def output_shape(self, input_shape: Shape) -> Shape:
        return (math.prod(input_shape),)


class Reshape3Dto2DSpec(_LayerBase):
    """Merge channel and spectral axes: (c, d, h, w) -> (c*d, h, w)."""

    kind: Literal["reshape3d2d"] = "reshape3d2d"

    def output_shape(self, input_shape: Shape) -> Shape:
        if len(input_shape) != 4:
            raise ValueError(f"reshape3d2d expects (c, d, h, w), got {input_shape}")
        channels, depth, rows, cols = input_shape
        return (channels * depth, rows, cols)


LayerSpec = Annotated[
    DenseSpec
    | Conv3DSpec
    | Conv2DSpec
    | BatchNormSpec
    | DropoutSpec
    | ActivationSpec
    | FlattenSpec
    | Reshape3Dto2DSpec,
    Field(discriminator="kind"),
]


def is_softmax(layer: LayerSpec) -> bool:
    """Whether *layer* is a softmax activation."""
    return isinstance(layer, ActivationSpec) and layer.fn is ActivationFn.softmax


class ModelSpec(BaseModel):
    """Ordered layer list plus per-sample input shape (batch axis excluded)."""

    model_config = ConfigDict(frozen=True)

    layers: list[LayerSpec] = Field(min_length=1)
    input_shape: Shape
    n_classes: int = Field(gt=0)

    @field_validator("input_shape")
    @classmethod
    def input_shape_positive(cls, value: Shape) -> Shape:
        if not value or any(d <= 0 for d in value):
            raise ValueError(f"input_shape must be non-empty and positive, got {value}")
        return value

    @model_validator(mode="after")
    def layers_compose(self) -> ModelSpec:
        if not is_softmax(self.layers[-1]):
            raise ValueError("the last layer must be a softmax activation")
        if any(is_softmax(layer) for layer in self.layers[:-1]):
            raise ValueError("softmax is only allowed as the last layer")
        shape = self.output_shapes()[-1]
        if shape != (self.n_classes,):
            raise ValueError(f"model emits {shape}, expected ({self.n_classes},)")
        return self

    def output_shapes(self) -> list[Shape]:
        """Per-sample output shape after each layer."""
        shapes: list[Shape] = []
        shape = self.input_shape
        for index, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except ValueError as exc:
                raise ValueError(f"layer {index} ({layer.kind}): {exc}") from exc
            shapes.append(shape)
        return shapes

    def architecture(self) -> tuple[int, ...]:
        """Width tuple in the form (input, hidden..., classes), counting dense layers."""
        widths = [math.prod(self.input_shape)]
        widths.extend(
            layer.out_features for layer in self.layers if isinstance(layer, DenseSpec)
        )
        return tuple(widths)


# ---------------------------------------------------------------------------
# Data preparation configs
# ---------------------------------------------------------------------------


class SynthSpec(BaseModel):
    """Recipe for a deterministic desk-scale synthetic scene."""

    model_config = ConfigDict(frozen=True)

    name: str = "synthetic"
    rows: int = Field(gt=0)
    cols: int = Field(gt=0)
    bands: int = Field(ge=2)
    n_classes: int = Field(ge=2)
    blob_count: int = Field(gt=0)
    noise_sigma: float = Field(default=0.05, ge=0.0)
    seed: int = Field(default=42, ge=0, lt=2**64)


class SplitSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    train_fraction: float = Field(gt=0.0, lt=1.0)
    seed: int = Field(default=42, ge=0, lt=2**64)
    stratified: bool = False


class PatchLayout(str, Enum):
    cubes = "cubes"
    flat = "flat"


class ClassEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    sample_count: int = Field(ge=0)


class ClassTable(BaseModel):
    """Class names with their labeled-pixel counts, index 1..K."""

    model_config = ConfigDict(frozen=True)

    classes: list[ClassEntry]

    @property
    def total(self) -> int:
        return sum(entry.sample_count for entry in self.classes)

    @property
    def names(self) -> list[str]:
        return [entry.name for entry in self.classes]


# ---------------------------------------------------------------------------
# Architectures and transfer
# ---------------------------------------------------------------------------


class VariantName(str, Enum):
    cnn = "cnn"
    mlp1 = "mlp1"
    mlp2 = "mlp2"
    mlp3 = "mlp3"


class ModelVariant(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: VariantName
    window: int = Field(gt=0)
    pca_components: int = Field(gt=0)
    n_classes: int = Field(ge=2)

    @field_validator("window")
    @classmethod
    def window_must_be_odd(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError(f"window must be odd, got {value}")
        return value

    @property
    def flat_features(self) -> int:
        return self.window * self.window * self.pca_components


class SurgerySpec(BaseModel):
    """Truncate-freeze-append recipe for transfer learning."""

    model_config = ConfigDict(frozen=True)

    drop_last: int = Field(ge=0, description="Trailing parameterized/BN layers to remove")
    head: list[LayerSpec] = Field(min_length=1)
    freeze_retained: bool = True
    head_seed: int = Field(default=42, ge=0, lt=2**64)

    @model_validator(mode="after")
    def head_ends_in_softmax(self) -> SurgerySpec:
        if not is_softmax(self.head[-1]):
            raise ValueError("surgery head must end in a softmax activation")
        return self


class CheckpointMeta(BaseModel):
    """Geometry stored next to the weights so eval/map can rebuild inputs."""

    model_config = ConfigDict(frozen=True)

    variant: VariantName | None = None
    window: int = Field(gt=0)
    pca_components: int = Field(gt=0)
    layout: PatchLayout
    class_names: list[str] = Field(default_factory=list)
    scene: str = ""
    pca_checkpoint: str | None = Field(
        default=None, description="Path of the HSPCA1 file fitted with this model"
    )
    split: SplitSpec | None = Field(
        default=None, description="Split used in training, so eval can rebuild its test part"
    )


# ---------------------------------------------------------------------------
# Training and evaluation
# ---------------------------------------------------------------------------


class AdamHyper(BaseModel):
    model_config = ConfigDict(frozen=True)

    lr: float = Field(default=1e-3, gt=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    epsilon: float = Field(default=1e-8, gt=0.0)


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    epochs: int = Field(default=20, ge=0)
    batch_size: int = Field(default=128, ge=1)
    seed: int = Field(default=42, ge=0, lt=2**64)
    adam: AdamHyper = Field(default_factory=AdamHyper)
    log_every: int = Field(default=10, ge=1)
    precision: Precision = Precision.f32


class EpochRecord(BaseModel):
    epoch: int
    loss: float
    accuracy: float
    seconds: float = Field(description="Wall time; excluded from artifacts")


class History(BaseModel):
    epochs: list[EpochRecord] = Field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [record.loss for record in self.epochs]


class Metrics(BaseModel):
    """Confusion matrix [true][pred] with derived accuracies."""

    confusion: list[list[int]]
    overall_accuracy: float
    average_accuracy: float
    per_class: list[float | None] = Field(
        description="Recall per class; None where the class has no support"
    )
    loss: float

    @property
    def total(self) -> int:
        return sum(sum(row) for row in self.confusion)


__all__ = [
    "ActivationFn",
    "ActivationSpec",
    "AdamHyper",
    "BatchNormSpec",
    "CheckpointMeta",
    "ClassEntry",
    "ClassTable",
    "Conv2DSpec",
    "Conv3DSpec",
    "DenseSpec",
    "DropoutSpec",
    "EngineMode",
    "EpochRecord",
    "ErrorCategory",
    "ErrorKind",
    "FlattenSpec",
    "History",
    "LayerSpec",
    "Metrics",
    "ModelSpec",
    "ModelVariant",
    "PatchLayout",
    "Precision",
    "Reshape3Dto2DSpec",
    "Shape",
    "SplitSpec",
    "SurgerySpec",
    "SynthSpec",
    "TrainConfig",
    "VariantName",
    "is_softmax",
]

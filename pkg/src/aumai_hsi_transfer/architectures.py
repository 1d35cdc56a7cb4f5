"""Model builders for the cnn/mlp1/mlp2/mlp3 variants and transfer surgery."""

from __future__ import annotations

import logging
from typing import Final

import numpy as np
import pydantic

from aumai_hsi_transfer.autodiff_nn import Params, count_params, init_params
from aumai_hsi_transfer.errors import DimensionError, SurgeryError
from aumai_hsi_transfer.models import (
    ActivationFn,
    ActivationSpec,
    BatchNormSpec,
    Conv2DSpec,
    Conv3DSpec,
    DenseSpec,
    DropoutSpec,
    FlattenSpec,
    LayerSpec,
    ModelSpec,
    ModelVariant,
    Precision,
    Reshape3Dto2DSpec,
    Shape,
    SurgerySpec,
    VariantName,
)

logger = logging.getLogger(__name__)

CNN_SPECTRAL_KERNELS: Final = (7, 5, 3)
CNN_FILTERS: Final = (8, 16, 32)
CNN_MIN_BANDS: Final = 15
CNN_CONV2D_FILTERS: Final = 64
CNN_DENSE_WIDTHS: Final = (256, 128)
CNN_HEAD_WIDTHS: Final = (256, 128, 64)
DROPOUT_RATE: Final = 0.4
LEAKY_ALPHA: Final = 0.01

MLP_WIDTHS: Final[dict[VariantName, tuple[int, ...]]] = {
    VariantName.mlp1: (10000, 5000),
    VariantName.mlp2: (472, 168),
    VariantName.mlp3: (1024, 512, 256, 128, 72),
}
MLP_BATCHNORM: Final[dict[VariantName, bool]] = {
    VariantName.mlp1: False,
    VariantName.mlp2: True,
    VariantName.mlp3: True,
}

# (drop_last, head hidden widths) reproducing the published transfer runs.
MLP_SURGERY: Final[dict[VariantName, tuple[int, tuple[int, ...]]]] = {
    VariantName.mlp1: (2, (5000,)),
    VariantName.mlp2: (1, (72,)),
    VariantName.mlp3: (3, (72, 32)),
}


def _relu() -> ActivationSpec:
    return ActivationSpec(fn=ActivationFn.relu)


def _softmax() -> ActivationSpec:
    return ActivationSpec(fn=ActivationFn.softmax)


def dense_head(
    in_features: int,
    widths: tuple[int, ...],
    n_classes: int,
    activation: ActivationFn = ActivationFn.relu,
    dropout: float | None = None,
    batchnorm: bool = False,
    alpha: float = LEAKY_ALPHA,
) -> list[LayerSpec]:
    """Dense hidden stack ending in a ``n_classes``-way softmax."""
    layers: list[LayerSpec] = []
    width = in_features
    for out in widths:
        layers.append(DenseSpec(in_features=width, out_features=out))
        if batchnorm:
            layers.append(BatchNormSpec(features=out))
        layers.append(ActivationSpec(fn=activation, alpha=alpha))
        if dropout is not None:
            layers.append(DropoutSpec(rate=dropout))
        width = out
    layers.append(DenseSpec(in_features=width, out_features=n_classes))
    layers.append(_softmax())
    return layers


def _cnn_trunk(bands: int, window: int) -> tuple[list[LayerSpec], int]:
    layers: list[LayerSpec] = []
    channels, depth = 1, bands
    for filters, k_spec in zip(CNN_FILTERS, CNN_SPECTRAL_KERNELS):
        layers.append(Conv3DSpec(in_channels=channels, out_channels=filters, k_spec=k_spec))
        layers.append(_relu())
        channels, depth = filters, depth - k_spec + 1
    layers.append(Reshape3Dto2DSpec())
    layers.append(Conv2DSpec(in_channels=channels * depth, out_channels=CNN_CONV2D_FILTERS))
    layers.append(_relu())
    layers.append(FlattenSpec())
    return layers, CNN_CONV2D_FILTERS * window * window


def build_model(variant: ModelVariant, leaky_alpha: float = LEAKY_ALPHA) -> ModelSpec:
    """Layer list for *variant* at its input geometry."""
    components, window, n_classes = variant.pca_components, variant.window, variant.n_classes
    if variant.name is VariantName.cnn:
        if components < CNN_MIN_BANDS:
            raise DimensionError(
                f"cnn needs at least {CNN_MIN_BANDS} spectral components, got {components}"
            )
        trunk, flat = _cnn_trunk(components, window)
        layers = trunk + dense_head(
            flat,
            CNN_DENSE_WIDTHS,
            n_classes,
            activation=ActivationFn.leaky_relu,
            dropout=DROPOUT_RATE,
            alpha=leaky_alpha,
        )
        input_shape: Shape = (1, components, window, window)
    else:
        layers = dense_head(
            variant.flat_features,
            MLP_WIDTHS[variant.name],
            n_classes,
            batchnorm=MLP_BATCHNORM[variant.name],
        )
        input_shape = (variant.flat_features,)
    try:
        return ModelSpec(layers=layers, input_shape=input_shape, n_classes=n_classes)
    except pydantic.ValidationError as exc:
        raise DimensionError(f"{variant.name.value} geometry is degenerate: {exc}") from exc


# ---------------------------------------------------------------------------
# Transfer surgery
# ---------------------------------------------------------------------------


def cut_index(spec: ModelSpec, drop_last: int) -> int:
    """First removed layer: the ``drop_last``-th counted layer from the end.

    Dense, convolution and batch-norm layers are counted. With
    ``drop_last == 0`` only the trailing uncounted layers are removed.
    """
    counted = [index for index, layer in enumerate(spec.layers) if layer.parameterized]
    if drop_last > len(counted) or drop_last >= len(spec.layers):
        raise SurgeryError(
            f"cannot drop {drop_last} layers from a model with {len(counted)} "
            f"parameterized layers"
        )
    if drop_last == 0:
        return counted[-1] + 1 if counted else 0
    return counted[-drop_last]


def junction_shape(spec: ModelSpec, drop_last: int) -> Shape:
    """Per-sample shape leaving the retained trunk."""
    cut = cut_index(spec, drop_last)
    return spec.input_shape if cut == 0 else spec.output_shapes()[cut - 1]


def _head_spec(head: list[LayerSpec], junction: Shape) -> ModelSpec:
    head = [layer.model_copy(update={"frozen": False}) for layer in head]
    widths = [layer.out_features for layer in head if isinstance(layer, DenseSpec)]
    if not widths:
        raise SurgeryError("surgery head needs at least one dense layer before the softmax")
    try:
        return ModelSpec(layers=head, input_shape=junction, n_classes=widths[-1])
    except pydantic.ValidationError as exc:
        detail = "; ".join(str(error["msg"]) for error in exc.errors())
        raise SurgeryError(f"head does not fit junction shape {junction}: {detail}") from exc


def surgery_spec(spec: ModelSpec, surgery: SurgerySpec) -> ModelSpec:
    """Model spec after truncate-freeze-append, without touching tensors."""
    cut = cut_index(spec, surgery.drop_last)
    head = _head_spec(surgery.head, junction_shape(spec, surgery.drop_last))
    retained = [
        layer.model_copy(update={"frozen": True}) if surgery.freeze_retained else layer
        for layer in spec.layers[:cut]
    ]
    return ModelSpec(
        layers=[*retained, *head.layers],
        input_shape=spec.input_shape,
        n_classes=head.n_classes,
    )


def transfer_surgery(
    spec: ModelSpec, params: Params, surgery: SurgerySpec
) -> tuple[ModelSpec, Params]:
    """Truncate a trained model, freeze what is kept, append a fresh head.

    Retained tensors are shared with *params* unchanged; the head is
    initialized from ``surgery.head_seed`` as a model of its own whose input
    is the junction shape.
    """
    if len(params.layers) != len(spec.layers):
        raise SurgeryError(
            f"params hold {len(params.layers)} layers, model has {len(spec.layers)}"
        )
    cut = cut_index(spec, surgery.drop_last)
    junction = junction_shape(spec, surgery.drop_last)
    head = _head_spec(surgery.head, junction)
    precision = Precision.f64 if params.dtype == np.float64 else Precision.f32
    head_params = init_params(head, surgery.head_seed, precision)

    new_spec = surgery_spec(spec, surgery)
    new_params = Params(layers=[*params.layers[:cut], *head_params.layers])
    trainable, frozen = count_params(new_spec)
    logger.info(
        "surgery: kept %d layers (junction %s), appended %d; trainable %d, frozen %d",
        cut,
        junction,
        len(head.layers),
        trainable,
        frozen,
    )
    return new_spec, new_params


def cnn_surgery(
    spec: ModelSpec, n_classes: int, head_seed: int = 42, dropout: float = DROPOUT_RATE
) -> SurgerySpec:
    """Strip the dense layers and softmax, append ReLU 256/128/64 and a softmax."""
    if not any(isinstance(layer, Conv3DSpec) for layer in spec.layers):
        raise SurgeryError("cnn transfer needs a model with a 3-D convolution trunk")
    dense_count = sum(isinstance(layer, DenseSpec) for layer in spec.layers)
    junction = junction_shape(spec, dense_count)
    if len(junction) != 1:
        raise SurgeryError(f"cnn trunk must end flattened, got junction {junction}")
    head = dense_head(junction[0], CNN_HEAD_WIDTHS, n_classes, dropout=dropout)
    return SurgerySpec(drop_last=dense_count, head=head, head_seed=head_seed)


def cnn_transfer_default(
    spec: ModelSpec, params: Params, n_classes: int = 9, head_seed: int = 42
) -> tuple[ModelSpec, Params]:
    """Apply the default CNN transfer: frozen conv trunk, fresh 256/128/64 head."""
    return transfer_surgery(spec, params, cnn_surgery(spec, n_classes, head_seed))


def published_surgery(
    name: VariantName, spec: ModelSpec, n_classes: int, head_seed: int = 42
) -> SurgerySpec:
    """Published surgery recipe for *name*, sized to the source model *spec*."""
    if name is VariantName.cnn:
        return cnn_surgery(spec, n_classes, head_seed)
    drop_last, widths = MLP_SURGERY[name]
    junction = junction_shape(spec, drop_last)
    if len(junction) != 1:
        raise SurgeryError(f"{name.value} junction must be flat, got {junction}")
    return SurgerySpec(
        drop_last=drop_last,
        head=dense_head(junction[0], widths, n_classes),
        head_seed=head_seed,
    )


__all__ = [
    "CNN_MIN_BANDS",
    "MLP_SURGERY",
    "MLP_WIDTHS",
    "build_model",
    "cnn_surgery",
    "cnn_transfer_default",
    "cut_index",
    "dense_head",
    "junction_shape",
    "published_surgery",
    "surgery_spec",
    "transfer_surgery",
]

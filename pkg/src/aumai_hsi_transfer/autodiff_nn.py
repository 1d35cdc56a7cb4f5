"""Minimal neural-network engine on numpy arrays.

Layer forward/backward passes, fused softmax + cross-entropy, Adam,
initialization, gradient checking and parameter accounting. Tensors are
plain ``numpy.ndarray`` objects in the engine dtype (float32 or float64).

Example::

    params = init_params(spec, seed=42)
    trace = forward(spec, params, x, EngineMode(training=True), rng)
    grads = backward(spec, params, trace, labels)
    params, state = adam_step(params, grads, state)
    params = apply_running_stats(params, trace)
"""

from __future__ import annotations

import hashlib
import itertools
import logging
import math
from collections.abc import Iterator, Mapping
from typing import Any, Final

import numpy as np
import numpy.typing as npt
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, Field

from aumai_hsi_transfer.errors import (
    BatchError,
    ContractError,
    DimensionError,
    LabelError,
    NumericError,
)
from aumai_hsi_transfer.models import (
    ActivationFn,
    ActivationSpec,
    AdamHyper,
    BatchNormSpec,
    Conv2DSpec,
    Conv3DSpec,
    DenseSpec,
    DropoutSpec,
    EngineMode,
    FlattenSpec,
    LayerSpec,
    ModelSpec,
    Precision,
    Reshape3Dto2DSpec,
)
from aumai_hsi_transfer.rng import Pcg32

logger = logging.getLogger(__name__)

Array = npt.NDArray[Any]
Grads = dict[str, Array]

TENSOR_NAMES: Final[dict[str, tuple[str, ...]]] = {
    "dense": ("weight", "bias"),
    "conv3d": ("weight", "bias"),
    "conv2d": ("weight", "bias"),
    "batchnorm": ("gamma", "beta", "running_mean", "running_var"),
}

_GENERATIONS = itertools.count(1)


def dtype_for(precision: Precision) -> type[np.floating[Any]]:
    """Numpy float type for a precision."""
    return np.float64 if precision is Precision.f64 else np.float32


def tensor_key(index: int, name: str) -> str:
    """Flat tensor key ``"<layer index>.<name>"``."""
    return f"{index}.{name}"


def parse_key(key: str) -> tuple[int, str]:
    """Split a tensor key back into layer index and tensor name."""
    index, _, name = key.partition(".")
    return int(index), name


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


class Params(BaseModel):
    """Named tensors per layer (empty dict for parameter-free layers).

    Every instance gets a fresh ``generation``; an activation trace records
    the generation it was computed with so :func:`backward` can reject a
    trace that predates an optimizer step.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    layers: list[dict[str, Any]]
    generation: int = Field(default_factory=lambda: next(_GENERATIONS))

    def named_tensors(self) -> Iterator[tuple[str, Array]]:
        """Yield ``(key, tensor)`` in layer order, names in their fixed order."""
        for index, tensors in enumerate(self.layers):
            for name, array in tensors.items():
                yield tensor_key(index, name), array

    def tensor(self, key: str) -> Array:
        index, name = parse_key(key)
        return self.layers[index][name]  # type: ignore[no-any-return]

    @property
    def dtype(self) -> np.dtype[Any]:
        for _, array in self.named_tensors():
            return array.dtype
        return np.dtype(np.float32)

    def astype(self, dtype: npt.DTypeLike) -> Params:
        return Params(
            layers=[
                {name: np.array(array, dtype=dtype) for name, array in tensors.items()}
                for tensors in self.layers
            ]
        )

    def replace(self, updates: Mapping[str, Array]) -> Params:
        """New instance with the given tensors swapped in; others are shared."""
        layers = [dict(tensors) for tensors in self.layers]
        for key, array in updates.items():
            index, name = parse_key(key)
            layers[index][name] = array
        return Params(layers=layers)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Params):
            return NotImplemented
        mine = list(self.named_tensors())
        theirs = list(other.named_tensors())
        return len(mine) == len(theirs) and all(
            k1 == k2 and a1.dtype == a2.dtype and np.array_equal(a1, a2)
            for (k1, a1), (k2, a2) in zip(mine, theirs)
        )

    __hash__ = None  # type: ignore[assignment]


class AdamState(BaseModel):
    """First/second moments per trainable tensor key plus the step counter."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    hyper: AdamHyper = Field(default_factory=AdamHyper)
    step: int = Field(default=0, ge=0)
    first_moment: dict[str, Any] = Field(default_factory=dict)
    second_moment: dict[str, Any] = Field(default_factory=dict)


class ActivationTrace(BaseModel):
    """Everything :func:`backward` needs from one forward pass."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    generation: int
    mode: EngineMode
    inputs: list[Any]
    caches: list[dict[str, Any]]
    logits: Any
    probs: Any
    running_updates: dict[int, tuple[Any, Any]] = Field(default_factory=dict)


# ---------------------------------------------------------------------------
# Dense
# ---------------------------------------------------------------------------


def dense_forward(x: Array, weight: Array, bias: Array) -> Array:
    """``x @ weight + bias``."""
    if x.ndim != 2 or weight.shape != (x.shape[1], bias.shape[0]):
        raise DimensionError(
            f"dense: input {x.shape}, weight {weight.shape}, bias {bias.shape}"
        )
    return x @ weight + bias


def dense_backward(
    x: Array, weight: Array, dy: Array, input_grad: bool = True
) -> tuple[Array | None, Array, Array]:
    """Gradients of a dense layer: ``(dx, dweight, dbias)``."""
    dx = dy @ weight.T if input_grad else None
    return dx, x.T @ dy, dy.sum(axis=0)


# ---------------------------------------------------------------------------
# Convolutions (cross-correlation, stride 1, spatial "same", spectral "valid")
# ---------------------------------------------------------------------------


def _conv3d_check(x: Array, kernel: Array, bias: Array) -> None:
    if x.ndim != 5 or kernel.ndim != 5:
        raise DimensionError(f"conv3d: input {x.shape}, kernel {kernel.shape}")
    if kernel.shape[1] != x.shape[1]:
        raise DimensionError(
            f"conv3d: kernel expects {kernel.shape[1]} channels, input has {x.shape[1]}"
        )
    if kernel.shape[3:] != (3, 3):
        raise DimensionError(f"conv3d: spatial kernel must be 3x3, got {kernel.shape[3:]}")
    if bias.shape != (kernel.shape[0],):
        raise DimensionError(f"conv3d: bias {bias.shape} for {kernel.shape[0]} filters")
    if x.shape[2] < kernel.shape[2]:
        raise DimensionError(
            f"conv3d: spectral depth {x.shape[2]} is smaller than kernel {kernel.shape[2]}"
        )


def _columns(x: Array, depth: int) -> Array:
    """View ``[n][ch][d'][h][w][kd][3][3]`` over the spatially padded input."""
    padded = np.pad(x, ((0, 0), (0, 0), (0, 0), (1, 1), (1, 1)))
    return sliding_window_view(padded, (depth, 3, 3), axis=(2, 3, 4))


def conv3d_forward(x: Array, kernel: Array, bias: Array) -> Array:
    """``[n, ch, d, h, w]`` x ``[oc, ch, kd, 3, 3]`` -> ``[n, oc, d-kd+1, h, w]``."""
    _conv3d_check(x, kernel, bias)
    cols = _columns(x, kernel.shape[2])
    out = np.tensordot(cols, kernel, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    out = out.transpose(0, 4, 1, 2, 3) + bias[None, :, None, None, None]
    return np.ascontiguousarray(out)


def conv3d_backward(
    x: Array, kernel: Array, dy: Array, input_grad: bool = True
) -> tuple[Array | None, Array, Array]:
    """Gradients of a valid-depth, same-spatial 3-D convolution: ``(dx, dkernel, dbias)``."""
    cols = _columns(x, kernel.shape[2])
    dkernel = np.tensordot(dy, cols, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    dbias = dy.sum(axis=(0, 2, 3, 4))
    if not input_grad:
        return None, dkernel, dbias

    n, channels, depth, rows, cols_ = x.shape
    out_depth = dy.shape[2]
    dpadded = np.zeros((n, channels, depth, rows + 2, cols_ + 2), dtype=dy.dtype)
    for a, i, j in itertools.product(range(kernel.shape[2]), range(3), range(3)):
        contrib = np.tensordot(dy, kernel[:, :, a, i, j], axes=([1], [0]))
        dpadded[:, :, a : a + out_depth, i : i + rows, j : j + cols_] += contrib.transpose(
            0, 4, 1, 2, 3
        )
    return dpadded[:, :, :, 1:-1, 1:-1], dkernel, dbias


def conv2d_forward(x: Array, kernel: Array, bias: Array) -> Array:
    """``[n, ch, h, w]`` x ``[oc, ch, 3, 3]`` -> ``[n, oc, h, w]``."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d: input {x.shape}, kernel {kernel.shape}")
    return conv3d_forward(x[:, :, None], kernel[:, :, None], bias)[:, :, 0]


def conv2d_backward(
    x: Array, kernel: Array, dy: Array, input_grad: bool = True
) -> tuple[Array | None, Array, Array]:
    """Gradients of a same-padded 3x3 convolution: ``(dx, dkernel, dbias)``."""
    dx, dkernel, dbias = conv3d_backward(
        x[:, :, None], kernel[:, :, None], dy[:, :, None], input_grad
    )
    return (None if dx is None else dx[:, :, 0]), dkernel[:, :, 0], dbias


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------


def batchnorm_forward(
    x: Array, tensors: Mapping[str, Array], spec: BatchNormSpec, batch_stats: bool
) -> tuple[Array, dict[str, Any]]:
    """Normalize features; ``batch_stats`` selects batch vs running statistics.

    With batch statistics the cache also carries the updated running
    mean/variance (momentum blend) for :func:`apply_running_stats`.
    """
    if x.ndim != 2 or x.shape[1] != spec.features:
        raise DimensionError(f"batchnorm expects [n, {spec.features}], got {x.shape}")
    dtype = x.dtype
    gamma = tensors["gamma"].astype(dtype, copy=False)
    beta = tensors["beta"].astype(dtype, copy=False)
    cache: dict[str, Any] = {"batch_stats": batch_stats}
    if batch_stats:
        if x.shape[0] < 2:
            raise BatchError(f"batch normalization in training needs n >= 2, got {x.shape[0]}")
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        keep = spec.momentum
        running = tensors["running_mean"]
        cache["running_mean"] = (keep * running + (1.0 - keep) * mean).astype(running.dtype)
        cache["running_var"] = (
            keep * tensors["running_var"] + (1.0 - keep) * var
        ).astype(running.dtype)
    else:
        mean = tensors["running_mean"].astype(dtype, copy=False)
        var = tensors["running_var"].astype(dtype, copy=False)
    inv_std = 1.0 / np.sqrt(var + spec.epsilon)
    x_hat = (x - mean) * inv_std
    cache["x_hat"] = x_hat
    cache["inv_std"] = inv_std
    return gamma * x_hat + beta, cache


def batchnorm_backward(
    dy: Array, gamma: Array, cache: Mapping[str, Any], input_grad: bool = True
) -> tuple[Array | None, Array, Array]:
    """Gradients of batch norm over the batch axis: ``(dx, dgamma, dbeta)``."""
    x_hat = cache["x_hat"]
    inv_std = cache["inv_std"]
    dgamma = (dy * x_hat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    if not input_grad:
        return None, dgamma, dbeta
    gamma = gamma.astype(dy.dtype, copy=False)
    if not cache["batch_stats"]:
        return dy * gamma * inv_std, dgamma, dbeta
    n = dy.shape[0]
    dx = (gamma * inv_std / n) * (n * dy - dbeta - x_hat * dgamma)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# Dropout and activations
# ---------------------------------------------------------------------------


def dropout_forward(
    x: Array, rate: float, training: bool, rng: Pcg32 | None
) -> tuple[Array, Array | None]:
    """Inverted dropout; one PCG32 draw per element in row-major order."""
    if not training or rate == 0.0:
        return x, None
    if rng is None:
        raise ContractError("dropout in training mode needs a random generator")
    keep = (rng.unit_array(x.size) >= rate).reshape(x.shape)
    scale = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * scale, scale


def relu(x: Array) -> Array:
    """Elementwise ``max(x, 0)``."""
    return np.maximum(x, 0)


def leaky_relu(x: Array, alpha: float) -> Array:
    """Elementwise ``x`` for positive inputs, ``alpha * x`` otherwise."""
    return np.where(x > 0, x, x * x.dtype.type(alpha))


def softmax(logits: Array) -> Array:
    """Row-wise softmax with the max subtracted first."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)  # type: ignore[no-any-return]


def softmax_cross_entropy(logits: Array, labels: npt.ArrayLike) -> tuple[float, Array, Array]:
    """Mean cross-entropy of row-wise softmax, its logit gradient, and the probabilities."""
    targets = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} and labels {targets.shape} disagree")
    n, k = logits.shape
    if n == 0:
        raise DimensionError("cannot compute a loss over an empty batch")
    if targets.min() < 0 or targets.max() >= k:
        raise LabelError(
            f"labels must lie in 0..{k - 1}, got range {targets.min()}..{targets.max()}"
        )
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - shifted[rows, targets]))
    probs = np.exp(shifted - log_norm[:, None])
    dlogits = probs.copy()
    dlogits[rows, targets] -= 1.0
    dlogits /= n
    return loss, dlogits, probs


# ---------------------------------------------------------------------------
# Whole-model passes
# ---------------------------------------------------------------------------


def first_trainable(spec: ModelSpec) -> int | None:
    """Index of the earliest parameterized layer that is not frozen."""
    for index, layer in enumerate(spec.layers):
        if layer.parameterized and not layer.frozen:
            return index
    return None


def forward(
    spec: ModelSpec,
    params: Params,
    x: npt.ArrayLike,
    mode: EngineMode | None = None,
    rng: Pcg32 | None = None,
) -> ActivationTrace:
    """Run every layer in order and keep the intermediates for backward.

    Frozen batch-norm layers always use their running statistics.
    """
    mode = mode or EngineMode()
    dtype = dtype_for(mode.precision)
    h: Array = np.asarray(x, dtype=dtype)
    if h.ndim < 2 or h.shape[1:] != spec.input_shape:
        raise DimensionError(
            f"input batch has shape {h.shape}, "
            f"model expects [n, {', '.join(map(str, spec.input_shape))}]"
        )
    if len(params.layers) != len(spec.layers):
        raise ContractError(
            f"params hold {len(params.layers)} layers, model has {len(spec.layers)}"
        )

    inputs: list[Array] = []
    caches: list[dict[str, Any]] = []
    running: dict[int, tuple[Array, Array]] = {}
    logits = h
    for index, layer in enumerate(spec.layers):
        inputs.append(h)
        tensors = params.layers[index]
        cache: dict[str, Any] = {}
        if isinstance(layer, DenseSpec):
            h = dense_forward(
                h,
                tensors["weight"].astype(dtype, copy=False),
                tensors["bias"].astype(dtype, copy=False),
            )
        elif isinstance(layer, Conv3DSpec):
            h = conv3d_forward(
                h,
                tensors["weight"].astype(dtype, copy=False),
                tensors["bias"].astype(dtype, copy=False),
            )
        elif isinstance(layer, Conv2DSpec):
            h = conv2d_forward(
                h,
                tensors["weight"].astype(dtype, copy=False),
                tensors["bias"].astype(dtype, copy=False),
            )
        elif isinstance(layer, BatchNormSpec):
            batch_stats = mode.training and not layer.frozen
            h, cache = batchnorm_forward(h, tensors, layer, batch_stats)
            if batch_stats:
                running[index] = (cache["running_mean"], cache["running_var"])
        elif isinstance(layer, DropoutSpec):
            h, scale = dropout_forward(h, layer.rate, mode.training and mode.dropout, rng)
            cache["scale"] = scale
        elif isinstance(layer, ActivationSpec):
            if layer.fn is ActivationFn.relu:
                h = relu(h)
            elif layer.fn is ActivationFn.leaky_relu:
                h = leaky_relu(h, layer.alpha)
            else:
                logits = h
                h = softmax(h)
        elif isinstance(layer, FlattenSpec):
            h = h.reshape(h.shape[0], -1)
        elif isinstance(layer, Reshape3Dto2DSpec):
            n, channels, depth, rows, cols = h.shape
            h = h.reshape(n, channels * depth, rows, cols)
        caches.append(cache)

    return ActivationTrace(
        generation=params.generation,
        mode=mode,
        inputs=inputs,
        caches=caches,
        logits=logits,
        probs=h,
        running_updates=running,
    )


def _layer_backward(
    layer: LayerSpec,
    tensors: Mapping[str, Array],
    x: Array,
    cache: Mapping[str, Any],
    grad: Array,
    input_grad: bool,
) -> tuple[Array | None, dict[str, Array]]:
    dtype = grad.dtype
    if isinstance(layer, DenseSpec):
        weight = tensors["weight"].astype(dtype, copy=False)
        dx, dw, db = dense_backward(x, weight, grad, input_grad)
        return dx, {"weight": dw, "bias": db}
    if isinstance(layer, Conv3DSpec):
        weight = tensors["weight"].astype(dtype, copy=False)
        dx, dw, db = conv3d_backward(x, weight, grad, input_grad)
        return dx, {"weight": dw, "bias": db}
    if isinstance(layer, Conv2DSpec):
        weight = tensors["weight"].astype(dtype, copy=False)
        dx, dw, db = conv2d_backward(x, weight, grad, input_grad)
        return dx, {"weight": dw, "bias": db}
    if isinstance(layer, BatchNormSpec):
        dx, dgamma, dbeta = batchnorm_backward(grad, tensors["gamma"], cache, input_grad)
        return dx, {"gamma": dgamma, "beta": dbeta}
    if isinstance(layer, DropoutSpec):
        scale = cache["scale"]
        return (grad if scale is None else grad * scale), {}
    if isinstance(layer, ActivationSpec):
        if layer.fn is ActivationFn.relu:
            return grad * (x > 0), {}
        if layer.fn is ActivationFn.leaky_relu:
            return grad * np.where(x > 0, 1.0, layer.alpha).astype(dtype), {}
        raise ContractError("softmax gradients are only defined fused with the loss")
    return grad.reshape(x.shape), {}


def backprop(
    spec: ModelSpec, params: Params, trace: ActivationTrace, dlogits: Array
) -> Grads:
    """Reverse pass from the gradient w.r.t. the final softmax input.

    Stops at the earliest trainable layer; frozen layers get no entries.
    """
    if trace.generation != params.generation:
        raise ContractError(
            f"activation trace is stale: computed with params generation "
            f"{trace.generation}, got {params.generation}"
        )
    first = first_trainable(spec)
    grads: Grads = {}
    if first is None:
        return grads
    grad = dlogits
    for index in range(len(spec.layers) - 2, first - 1, -1):
        layer = spec.layers[index]
        dx, layer_grads = _layer_backward(
            layer,
            params.layers[index],
            trace.inputs[index],
            trace.caches[index],
            grad,
            input_grad=index > first,
        )
        if not layer.frozen:
            for name, value in layer_grads.items():
                grads[tensor_key(index, name)] = value
        if dx is not None:
            grad = dx
    return grads


def backward(
    spec: ModelSpec, params: Params, trace: ActivationTrace, labels: npt.ArrayLike
) -> Grads:
    """Gradients of the mean cross-entropy for every trainable tensor."""
    _, dlogits, _ = softmax_cross_entropy(trace.logits, labels)
    return backprop(spec, params, trace, dlogits)


def apply_running_stats(params: Params, trace: ActivationTrace) -> Params:
    """Fold the batch-norm running statistics recorded in *trace* into *params*."""
    if not trace.running_updates:
        return params
    updates: dict[str, Array] = {}
    for index, (mean, var) in trace.running_updates.items():
        updates[tensor_key(index, "running_mean")] = mean
        updates[tensor_key(index, "running_var")] = var
    return params.replace(updates)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


def adam_step(params: Params, grads: Grads, state: AdamState) -> tuple[Params, AdamState]:
    """One bias-corrected Adam update of the tensors named in *grads*."""
    for key, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite gradient for tensor {key}")

    hyper = state.hyper
    step = state.step + 1
    first_fix = 1.0 - hyper.beta1**step
    second_fix = 1.0 - hyper.beta2**step
    first_moment = dict(state.first_moment)
    second_moment = dict(state.second_moment)
    updates: dict[str, Array] = {}
    for key, grad in grads.items():
        value = params.tensor(key)
        g = grad.astype(value.dtype, copy=False)
        m = first_moment.get(key, np.zeros_like(value))
        v = second_moment.get(key, np.zeros_like(value))
        m = hyper.beta1 * m + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * v + (1.0 - hyper.beta2) * g * g
        m_hat = m / first_fix
        v_hat = v / second_fix
        updates[key] = (value - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.epsilon)).astype(
            value.dtype, copy=False
        )
        first_moment[key] = m
        second_moment[key] = v
    new_state = AdamState(
        hyper=hyper, step=step, first_moment=first_moment, second_moment=second_moment
    )
    return params.replace(updates), new_state


# ---------------------------------------------------------------------------
# Initialization and accounting
# ---------------------------------------------------------------------------


def _fans(layer: DenseSpec | Conv3DSpec | Conv2DSpec) -> tuple[int, int, tuple[int, ...]]:
    if isinstance(layer, DenseSpec):
        return layer.in_features, layer.out_features, (layer.in_features, layer.out_features)
    if isinstance(layer, Conv3DSpec):
        taps = layer.k_spec * layer.k_row * layer.k_col
        shape = (layer.out_channels, layer.in_channels, layer.k_spec, layer.k_row, layer.k_col)
        return layer.in_channels * taps, layer.out_channels * taps, shape
    taps = layer.k * layer.k
    shape = (layer.out_channels, layer.in_channels, layer.k, layer.k)
    return layer.in_channels * taps, layer.out_channels * taps, shape


def _feeds_softmax(spec: ModelSpec, index: int) -> bool:
    """True when the next activation after layer *index* is the softmax."""
    for layer in spec.layers[index + 1 :]:
        if isinstance(layer, ActivationSpec):
            return layer.fn is ActivationFn.softmax
        if layer.parameterized and not isinstance(layer, BatchNormSpec):
            return False
    return True


def init_params(
    spec: ModelSpec, seed: int, precision: Precision = Precision.f32
) -> Params:
    """Uniform weights (He bound before ReLU-family, Glorot before softmax), zero biases.

    Weights are drawn layer by layer in spec order, entries in row-major
    order, from ``Pcg32(seed, stream=0)``.
    """
    dtype = dtype_for(precision)
    rng = Pcg32(seed, stream=0)
    layers: list[dict[str, Any]] = []
    for index, layer in enumerate(spec.layers):
        if isinstance(layer, DenseSpec | Conv3DSpec | Conv2DSpec):
            fan_in, fan_out, shape = _fans(layer)
            if _feeds_softmax(spec, index):
                bound = math.sqrt(6.0 / (fan_in + fan_out))
            else:
                bound = math.sqrt(6.0 / fan_in)
            weight = rng.uniform_symmetric(math.prod(shape), bound, dtype).reshape(shape)
            out = shape[1] if isinstance(layer, DenseSpec) else shape[0]
            layers.append({"weight": weight, "bias": np.zeros(out, dtype=dtype)})
        elif isinstance(layer, BatchNormSpec):
            layers.append(
                {
                    "gamma": np.ones(layer.features, dtype=dtype),
                    "beta": np.zeros(layer.features, dtype=dtype),
                    "running_mean": np.zeros(layer.features, dtype=dtype),
                    "running_var": np.ones(layer.features, dtype=dtype),
                }
            )
        else:
            layers.append({})
    return Params(layers=layers)


def param_shapes(spec: ModelSpec) -> list[dict[str, tuple[int, ...]]]:
    """Tensor shapes implied by *spec*, one dict per layer."""
    shapes: list[dict[str, tuple[int, ...]]] = []
    for layer in spec.layers:
        if isinstance(layer, DenseSpec | Conv3DSpec | Conv2DSpec):
            _, _, shape = _fans(layer)
            out = shape[1] if isinstance(layer, DenseSpec) else shape[0]
            shapes.append({"weight": shape, "bias": (out,)})
        elif isinstance(layer, BatchNormSpec):
            shapes.append({name: (layer.features,) for name in TENSOR_NAMES["batchnorm"]})
        else:
            shapes.append({})
    return shapes


def layer_param_count(layer: LayerSpec) -> int:
    """Trainable-parameter count of one layer (running statistics excluded)."""
    if isinstance(layer, DenseSpec):
        return layer.in_features * layer.out_features + layer.out_features
    if isinstance(layer, Conv3DSpec):
        taps = layer.k_spec * layer.k_row * layer.k_col
        return layer.out_channels * layer.in_channels * taps + layer.out_channels
    if isinstance(layer, Conv2DSpec):
        return layer.out_channels * layer.in_channels * layer.k * layer.k + layer.out_channels
    if isinstance(layer, BatchNormSpec):
        return 2 * layer.features
    return 0


def count_params(spec: ModelSpec) -> tuple[int, int]:
    """``(trainable, frozen)`` parameter counts."""
    trainable = frozen = 0
    for layer in spec.layers:
        count = layer_param_count(layer)
        if layer.frozen:
            frozen += count
        else:
            trainable += count
    return trainable, frozen


def frozen_digest(spec: ModelSpec, params: Params) -> str:
    """SHA-256 over every tensor of the frozen layers, in layer order."""
    digest = hashlib.sha256()
    for index, layer in enumerate(spec.layers):
        if not layer.frozen:
            continue
        for name, array in params.layers[index].items():
            digest.update(tensor_key(index, name).encode("utf-8"))
            digest.update(np.ascontiguousarray(array).tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------


def _sample_indices(size: int, limit: int, rng: Pcg32) -> list[int]:
    """Up to *limit* distinct flat indices by a partial Fisher-Yates shuffle."""
    if size <= limit:
        return list(range(size))
    swapped: dict[int, int] = {}
    chosen: list[int] = []
    for i in range(limit):
        j = i + rng.bounded(size - i)
        chosen.append(swapped.get(j, j))
        swapped[j] = swapped.get(i, i)
    return sorted(chosen)


def _batchnorm_bias_keys(spec: ModelSpec) -> set[str]:
    """Bias keys of dense layers feeding a batch norm; their gradient is identically zero."""
    return {
        tensor_key(index, "bias")
        for index, (layer, after) in enumerate(zip(spec.layers, spec.layers[1:]))
        if isinstance(layer, DenseSpec) and isinstance(after, BatchNormSpec)
    }


def _kink_pattern(spec: ModelSpec, trace: ActivationTrace) -> list[Array]:
    return [
        trace.inputs[index] > 0
        for index, layer in enumerate(spec.layers)
        if isinstance(layer, ActivationSpec) and layer.fn is not ActivationFn.softmax
    ]


def grad_check(
    spec: ModelSpec,
    params: Params,
    x: npt.ArrayLike,
    labels: npt.ArrayLike,
    step: float = 1e-5,
    max_scalars: int = 500,
    seed: int = 42,
    floor: float = 1e-8,
) -> float:
    """Max relative error between :func:`backward` and central differences.

    Runs in float64 with training-mode batch statistics and dropout off.
    Tensors larger than *max_scalars* are checked on a seeded subsample.
    Scalars whose perturbation flips the sign of any ReLU-family input are
    skipped, since the loss is not differentiable there. So are biases that
    feed a batch norm in training mode: the batch mean cancels them.
    """
    mode = EngineMode(precision=Precision.f64, training=True, dropout=False)
    work = params.astype(np.float64)
    batch = np.asarray(x, dtype=np.float64)
    targets = np.asarray(labels, dtype=np.int64)

    trace = forward(spec, work, batch, mode)
    analytic = backward(spec, work, trace, targets)
    baseline = _kink_pattern(spec, trace)
    rng = Pcg32(seed, stream=0)

    worst = 0.0
    checked = skipped = 0
    cancelled = _batchnorm_bias_keys(spec)
    for key in analytic:
        if key in cancelled:
            skipped += analytic[key].size
            continue
        flat = work.tensor(key).reshape(-1)
        expected = analytic[key].reshape(-1)
        for idx in _sample_indices(flat.size, max_scalars, rng):
            original = float(flat[idx])
            flat[idx] = original + step
            plus = forward(spec, work, batch, mode)
            high = float(flat[idx])
            flat[idx] = original - step
            minus = forward(spec, work, batch, mode)
            low = float(flat[idx])
            flat[idx] = original
            patterns = (_kink_pattern(spec, plus), _kink_pattern(spec, minus))
            if any(
                not np.array_equal(base, other)
                for pattern in patterns
                for base, other in zip(baseline, pattern)
            ):
                skipped += 1
                continue
            loss_plus = softmax_cross_entropy(plus.logits, targets)[0]
            loss_minus = softmax_cross_entropy(minus.logits, targets)[0]
            numeric = (loss_plus - loss_minus) / (high - low)
            exact = float(expected[idx])
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            worst = max(worst, error)
            checked += 1
    logger.info(
        "grad check: %d scalars checked, %d skipped (kinks, cancelled biases), max rel error %.3e",
        checked,
        skipped,
        worst,
    )
    return worst


__all__ = [
    "ActivationTrace",
    "AdamState",
    "Grads",
    "Params",
    "TENSOR_NAMES",
    "adam_step",
    "apply_running_stats",
    "backprop",
    "backward",
    "batchnorm_backward",
    "batchnorm_forward",
    "conv2d_backward",
    "conv2d_forward",
    "conv3d_backward",
    "conv3d_forward",
    "count_params",
    "dense_backward",
    "dense_forward",
    "dropout_forward",
    "dtype_for",
    "first_trainable",
    "forward",
    "frozen_digest",
    "grad_check",
    "init_params",
    "layer_param_count",
    "leaky_relu",
    "param_shapes",
    "parse_key",
    "relu",
    "softmax",
    "softmax_cross_entropy",
    "tensor_key",
]

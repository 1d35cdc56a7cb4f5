"""Mini-batch training, evaluation metrics and whole-scene prediction maps."""

from __future__ import annotations

import json
import logging
import time
from collections.abc import Callable, Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Final

import numpy as np
import numpy.typing as npt

from aumai_hsi_transfer.autodiff_nn import (
    AdamState,
    Params,
    adam_step,
    apply_running_stats,
    backprop,
    count_params,
    dtype_for,
    forward,
    softmax,
    softmax_cross_entropy,
)
from aumai_hsi_transfer.errors import (
    BatchError,
    ConfigError,
    DimensionError,
    DivergenceError,
    EvaluationError,
    IoError,
    LabelError,
    ValidationError,
)
from aumai_hsi_transfer.linalg_prep import (
    PatchSet,
    PcaModel,
    apply_pca,
    flatten_samples,
    window_view,
)
from aumai_hsi_transfer.models import (
    ActivationFn,
    ActivationSpec,
    BatchNormSpec,
    EngineMode,
    EpochRecord,
    History,
    Metrics,
    ModelSpec,
    PatchLayout,
    Precision,
    TrainConfig,
    VariantName,
)
from aumai_hsi_transfer.rng import Pcg32, epoch_streams
from aumai_hsi_transfer.scene_io import Scene

logger = logging.getLogger(__name__)

EVAL_BATCH_SIZE: Final = 1024
EpochCallback = Callable[[EpochRecord], None]

# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def trains_batchnorm(spec: ModelSpec) -> bool:
    """Whether any trainable layer is a batch norm."""
    return any(isinstance(layer, BatchNormSpec) and not layer.frozen for layer in spec.layers)


def batch_slices(count: int, batch_size: int, fold_singleton: bool) -> list[slice]:
    """Sequential batch bounds; a trailing singleton is merged into its predecessor."""
    bounds = [slice(start, min(start + batch_size, count)) for start in range(0, count, batch_size)]
    if fold_singleton and len(bounds) > 1 and bounds[-1].stop - bounds[-1].start == 1:
        last = bounds.pop()
        bounds[-1] = slice(bounds[-1].start, last.stop)
    return bounds


def _check_geometry(spec: ModelSpec, patches: PatchSet) -> None:
    if patches.sample_shape != spec.input_shape:
        raise DimensionError(
            f"samples have shape {patches.sample_shape}, model expects {spec.input_shape}"
        )
    if len(patches) and int(patches.y.max()) > spec.n_classes:
        raise LabelError(
            f"class id {int(patches.y.max())} exceeds the model's {spec.n_classes} classes"
        )


def _log_hyperparameters(spec: ModelSpec, cfg: TrainConfig, samples: int) -> None:
    alphas = sorted(
        {
            layer.alpha
            for layer in spec.layers
            if isinstance(layer, ActivationSpec) and layer.fn is ActivationFn.leaky_relu
        }
    )
    trainable, frozen = count_params(spec)
    logger.info(
        "training %d samples: epochs=%d batch=%d seed=%d lr=%g betas=(%g, %g) eps=%g "
        "precision=%s init=uniform(he|glorot) leaky_alpha=%s trainable=%d frozen=%d",
        samples,
        cfg.epochs,
        cfg.batch_size,
        cfg.seed,
        cfg.adam.lr,
        cfg.adam.beta1,
        cfg.adam.beta2,
        cfg.adam.epsilon,
        cfg.precision.value,
        alphas or "-",
        trainable,
        frozen,
    )


def train(
    spec: ModelSpec,
    params: Params,
    trainset: PatchSet,
    cfg: TrainConfig,
    on_epoch: EpochCallback | None = None,
) -> tuple[Params, History]:
    """Adam over seeded per-epoch shuffles; frozen tensors are never updated.

    Epoch ``e`` shuffles with PCG32 stream ``2e+1`` and draws dropout masks
    from stream ``2e+2``, both seeded with ``cfg.seed``.
    """
    count = len(trainset)
    if count == 0:
        raise ValidationError("training set is empty")
    _check_geometry(spec, trainset)
    bn_training = trains_batchnorm(spec)
    if bn_training and cfg.batch_size < 2:
        raise ConfigError("batch_size must be at least 2 when batch normalization trains")
    if bn_training and count < 2:
        raise BatchError(f"batch normalization needs at least 2 training samples, got {count}")

    history = History()
    if cfg.epochs == 0:
        return params, history

    dtype = dtype_for(cfg.precision)
    if params.dtype != dtype:
        params = params.astype(dtype)
    mode = EngineMode(precision=cfg.precision, training=True)
    state = AdamState(hyper=cfg.adam)
    targets = trainset.targets
    _log_hyperparameters(spec, cfg, count)

    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        shuffle_stream, dropout_stream = epoch_streams(epoch)
        order = Pcg32(cfg.seed, shuffle_stream).permutation(count)
        dropout_rng = Pcg32(cfg.seed, dropout_stream)
        loss_sum = 0.0
        correct = 0
        for batch, bounds in enumerate(batch_slices(count, cfg.batch_size, bn_training)):
            index = order[bounds]
            labels = targets[index]
            trace = forward(spec, params, trainset.x[index], mode, dropout_rng)
            loss, dlogits, probs = softmax_cross_entropy(trace.logits, labels)
            if not np.isfinite(loss):
                raise DivergenceError(epoch, batch, loss)
            grads = backprop(spec, params, trace, dlogits)
            params, state = adam_step(params, grads, state)
            params = apply_running_stats(params, trace)
            loss_sum += loss * len(index)
            correct += int(np.sum(np.argmax(probs, axis=1) == labels))
            if batch % cfg.log_every == 0:
                logger.debug("epoch %d batch %d loss %.6f", epoch + 1, batch, loss)
        record = EpochRecord(
            epoch=epoch + 1,
            loss=loss_sum / count,
            accuracy=correct / count,
            seconds=time.perf_counter() - started,
        )
        history.epochs.append(record)
        logger.info(
            "epoch %d/%d loss %.6f accuracy %.4f (%.2fs)",
            record.epoch,
            cfg.epochs,
            record.loss,
            record.accuracy,
            record.seconds,
        )
        if on_epoch is not None:
            on_epoch(record)
    return params, history


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def _run_batches(
    fn: Callable[[slice], npt.NDArray[Any]], count: int, batch_size: int, threads: int
) -> list[npt.NDArray[Any]]:
    """Apply *fn* to fixed batch bounds; results come back in batch order."""
    bounds = [slice(start, min(start + batch_size, count)) for start in range(0, count, batch_size)]
    if threads <= 1 or len(bounds) <= 1:
        return [fn(bound) for bound in bounds]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, bounds))


def predict_logits(
    spec: ModelSpec,
    params: Params,
    x: npt.NDArray[Any],
    batch_size: int = EVAL_BATCH_SIZE,
    threads: int = 1,
) -> npt.NDArray[Any]:
    """Inference-mode pre-softmax outputs for every row of *x*."""
    precision = Precision.f64 if params.dtype == np.float64 else Precision.f32
    mode = EngineMode(precision=precision, training=False)

    def run(bounds: slice) -> npt.NDArray[Any]:
        return forward(spec, params, x[bounds], mode).logits  # type: ignore[no-any-return]

    parts = _run_batches(run, x.shape[0], batch_size, threads)
    if not parts:
        return np.empty((0, spec.n_classes), dtype=dtype_for(precision))
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def confusion_matrix(
    preds: npt.ArrayLike, labels: npt.ArrayLike, n_classes: int
) -> npt.NDArray[np.int64]:
    """``K x K`` counts indexed ``[true][pred]`` (0-based classes)."""
    predicted = np.asarray(preds, dtype=np.int64)
    truth = np.asarray(labels, dtype=np.int64)
    if predicted.shape != truth.shape or predicted.ndim != 1:
        raise DimensionError(
            f"predictions {predicted.shape} and labels {truth.shape} must be equal-length vectors"
        )
    for name, values in (("prediction", predicted), ("label", truth)):
        if values.size and (values.min() < 0 or values.max() >= n_classes):
            raise LabelError(f"{name} outside 0..{n_classes - 1}")
    flat = np.bincount(truth * n_classes + predicted, minlength=n_classes * n_classes)
    return flat.reshape(n_classes, n_classes)


def metrics_from_confusion(confusion: npt.ArrayLike, loss: float) -> Metrics:
    """OA, AA and per-class recall from a confusion matrix."""
    matrix = np.asarray(confusion, dtype=np.int64)
    total = int(matrix.sum())
    if total == 0:
        raise EvaluationError("confusion matrix is empty")
    support = matrix.sum(axis=1)
    per_class: list[float | None] = [
        float(matrix[c, c] / support[c]) if support[c] else None for c in range(matrix.shape[0])
    ]
    present = [value for value in per_class if value is not None]
    return Metrics(
        confusion=matrix.tolist(),
        overall_accuracy=float(np.trace(matrix) / total),
        average_accuracy=float(np.mean(present)),
        per_class=per_class,
        loss=loss,
    )


def evaluate(
    spec: ModelSpec,
    params: Params,
    testset: PatchSet,
    batch_size: int = EVAL_BATCH_SIZE,
    threads: int = 1,
) -> Metrics:
    """Inference-mode metrics; argmax ties resolve to the lowest class index."""
    if len(testset) == 0:
        raise EvaluationError("test set is empty")
    _check_geometry(spec, testset)
    targets = testset.targets
    logits = predict_logits(spec, params, testset.x, batch_size, threads)
    loss = softmax_cross_entropy(logits, targets)[0]
    preds = np.argmax(softmax(logits), axis=1)
    metrics = metrics_from_confusion(confusion_matrix(preds, targets, spec.n_classes), loss)
    logger.info(
        "evaluated %d samples: OA %.4f AA %.4f loss %.6f",
        len(testset),
        metrics.overall_accuracy,
        metrics.average_accuracy,
        metrics.loss,
    )
    return metrics


# ---------------------------------------------------------------------------
# Classification maps
# ---------------------------------------------------------------------------


def input_layout(spec: ModelSpec, window: int, components: int) -> PatchLayout:
    """Layout the model consumes, checked against the patch geometry."""
    if spec.input_shape == (1, components, window, window):
        return PatchLayout.cubes
    if spec.input_shape == (window * window * components,):
        return PatchLayout.flat
    raise DimensionError(
        f"model input {spec.input_shape} does not fit window {window} "
        f"with {components} components"
    )


def predict_map(
    spec: ModelSpec,
    params: Params,
    scene: Scene,
    pca: PcaModel,
    window: int,
    mask: bool = True,
    batch_size: int = EVAL_BATCH_SIZE,
    threads: int = 1,
) -> npt.NDArray[np.uint16]:
    """Class id (1..K) for every pixel; 0 where unlabeled when *mask* is on."""
    if pca.bands != scene.bands:
        raise DimensionError(f"PCA was fitted on {pca.bands} bands, scene has {scene.bands}")
    layout = input_layout(spec, window, pca.n_components)
    reduced = apply_pca(scene.cube, pca).astype(np.float32)
    windows = window_view(reduced, window)

    if mask:
        rows, cols = np.nonzero(scene.labels)
    else:
        rows, cols = np.divmod(np.arange(scene.rows * scene.cols), scene.cols)
    precision = Precision.f64 if params.dtype == np.float64 else Precision.f32
    mode = EngineMode(precision=precision, training=False)

    def classify(bounds: slice) -> npt.NDArray[np.int64]:
        cubes = np.ascontiguousarray(windows[rows[bounds], cols[bounds]])[:, None]
        x = cubes if layout is PatchLayout.cubes else flatten_samples(cubes)
        trace = forward(spec, params, x, mode)
        return np.argmax(trace.probs, axis=1)  # type: ignore[no-any-return]

    out = np.zeros((scene.rows, scene.cols), dtype=np.uint16)
    parts = _run_batches(classify, rows.shape[0], batch_size, threads)
    if parts:
        out[rows, cols] = np.concatenate(parts) + 1
    logger.info("predicted %d pixels (mask=%s)", rows.shape[0], mask)
    return out


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def metrics_report(
    metrics: Metrics,
    seeds: Mapping[str, int],
    history: History | None = None,
    model: Mapping[str, Any] | None = None,
) -> dict[str, Any]:
    """Deterministic metrics document (wall times are left out)."""
    report: dict[str, Any] = {
        "oa": metrics.overall_accuracy,
        "aa": metrics.average_accuracy,
        "loss": metrics.loss,
        "per_class": metrics.per_class,
        "confusion": metrics.confusion,
        "seeds": dict(seeds),
        "history": [
            {"epoch": record.epoch, "loss": record.loss, "accuracy": record.accuracy}
            for record in (history.epochs if history else [])
        ],
    }
    if model is not None:
        report["model"] = dict(model)
    return report


def model_summary(spec: ModelSpec, variant: VariantName | None) -> dict[str, Any]:
    """Variant, architecture and parameter counts for reports."""
    trainable, frozen = count_params(spec)
    return {
        "variant": None if variant is None else variant.value,
        "architecture": list(spec.architecture()),
        "trainable": trainable,
        "frozen": frozen,
    }


def write_metrics(report: Mapping[str, Any], path: str | Path) -> None:
    """Write a metrics report as sorted, indented JSON."""
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write metrics {path}: {exc}") from exc


def read_metrics(path: str | Path) -> dict[str, Any]:
    """Read a metrics report written by :func:`write_metrics`."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read metrics {path}: {exc}") from exc
    try:
        report = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(report, dict) or "oa" not in report or "aa" not in report:
        raise ConfigError(f"{path} is not a metrics report")
    return report


def format_metrics_table(metrics: Metrics, class_names: Sequence[str] = ()) -> str:
    """Aligned per-class recall table followed by OA/AA/loss."""
    names = list(class_names) or [f"class_{c + 1}" for c in range(len(metrics.per_class))]
    width = max(len("class"), *(len(name) for name in names))
    lines = [f"{'class':<{width}}  {'support':>8}  {'recall':>8}"]
    for name, row, recall in zip(names, metrics.confusion, metrics.per_class):
        shown = "-" if recall is None else f"{recall:.4f}"
        lines.append(f"{name:<{width}}  {sum(row):>8}  {shown:>8}")
    lines.append(f"{'OA':<{width}}  {metrics.total:>8}  {metrics.overall_accuracy:>8.4f}")
    lines.append(f"{'AA':<{width}}  {'':>8}  {metrics.average_accuracy:>8.4f}")
    lines.append(f"{'loss':<{width}}  {'':>8}  {metrics.loss:>8.4f}")
    return "\n".join(lines)


_ORDERING: Final = (VariantName.mlp2, VariantName.mlp3, VariantName.mlp1)


def ordering_holds(reports: Iterable[Mapping[str, Any]]) -> bool | None:
    """Whether target OA ranks mlp2 > mlp3 > mlp1; ``None`` if a variant is missing."""
    best: dict[str, float] = {}
    for report in reports:
        variant = (report.get("model") or {}).get("variant")
        if variant is not None:
            best[variant] = max(best.get(variant, 0.0), float(report["oa"]))
    if any(name.value not in best for name in _ORDERING):
        return None
    scores = [best[name.value] for name in _ORDERING]
    return scores[0] > scores[1] > scores[2]


def compare_table(reports: Mapping[str, Mapping[str, Any]]) -> str:
    """One row per run: architecture, trainable parameters, OA and AA."""
    rows = []
    for label, report in reports.items():
        model = report.get("model") or {}
        architecture = model.get("architecture")
        rows.append(
            (
                label,
                model.get("variant") or "-",
                "(" + ",".join(str(w) for w in architecture) + ")" if architecture else "-",
                f"{model['trainable']:,}" if "trainable" in model else "-",
                f"{100 * float(report['oa']):.2f}",
                f"{100 * float(report['aa']):.2f}",
            )
        )
    header = ("run", "variant", "architecture", "trainable", "OA %", "AA %")
    widths = [max(len(str(row[i])) for row in [header, *rows]) for i in range(len(header))]
    lines = ["  ".join(f"{cell:<{w}}" for cell, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(f"{cell:<{w}}" for cell, w in zip(row, widths)) for row in rows)
    return "\n".join(lines)


__all__ = [
    "EVAL_BATCH_SIZE",
    "batch_slices",
    "compare_table",
    "confusion_matrix",
    "evaluate",
    "format_metrics_table",
    "input_layout",
    "metrics_from_confusion",
    "metrics_report",
    "model_summary",
    "ordering_holds",
    "predict_logits",
    "predict_map",
    "read_metrics",
    "train",
    "trains_batchnorm",
    "write_metrics",
]

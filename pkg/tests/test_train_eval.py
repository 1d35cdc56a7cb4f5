"""Tests for training, metrics, prediction maps and metrics reports."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import pytest

from aumai_hsi_transfer.architectures import build_model, dense_head, published_surgery, transfer_surgery
from aumai_hsi_transfer.autodiff_nn import Params, frozen_digest, init_params
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
    extract_patches,
    fit_pca,
    flatten_patches,
    split_train_test,
)
from aumai_hsi_transfer.models import (
    AdamHyper,
    EpochRecord,
    ModelSpec,
    ModelVariant,
    PatchLayout,
    Precision,
    SplitSpec,
    SynthSpec,
    TrainConfig,
    VariantName,
)
from aumai_hsi_transfer.scene_io import Scene, generate_synthetic_scene
from aumai_hsi_transfer.train_eval import (
    batch_slices,
    compare_table,
    confusion_matrix,
    evaluate,
    format_metrics_table,
    input_layout,
    metrics_from_confusion,
    metrics_report,
    model_summary,
    ordering_holds,
    predict_logits,
    predict_map,
    read_metrics,
    train,
    trains_batchnorm,
    write_metrics,
)


def _flat_set(x: np.ndarray, y: np.ndarray, n_classes: int) -> PatchSet:
    return PatchSet(
        x=np.asarray(x, dtype=np.float32),
        y=np.asarray(y, dtype=np.int64),
        positions=np.zeros((len(y), 2), dtype=np.int64),
        window=1,
        bands=np.asarray(x).shape[1],
        n_classes=n_classes,
        layout=PatchLayout.flat,
    )


def _clusters(rng: np.random.Generator, per_class: int = 20, features: int = 4) -> PatchSet:
    """Three well separated Gaussian clusters."""
    centres = np.eye(3, features) * 4.0
    x = np.concatenate([centres[c] + 0.3 * rng.normal(size=(per_class, features)) for c in range(3)])
    y = np.repeat(np.arange(1, 4), per_class)
    return _flat_set(x, y, 3)


def _zero_params(spec: ModelSpec) -> Params:
    params = init_params(spec, 0)
    return Params(layers=[{name: np.zeros_like(a) for name, a in t.items()} for t in params.layers])


def _desk_split(scene: Scene, pca: PcaModel, window: int) -> tuple[PatchSet, PatchSet]:
    patches = extract_patches(apply_pca(scene.cube, pca), scene.labels, window, scene.n_classes)
    return split_train_test(flatten_patches(patches), SplitSpec(train_fraction=0.7, seed=42))


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


class TestBatchSlices:
    def test_even_split(self) -> None:
        assert batch_slices(8, 4, True) == [slice(0, 4), slice(4, 8)]

    def test_short_tail_kept(self) -> None:
        assert batch_slices(10, 4, False) == [slice(0, 4), slice(4, 8), slice(8, 10)]

    def test_singleton_folded(self) -> None:
        assert batch_slices(9, 4, True) == [slice(0, 4), slice(4, 9)]

    def test_singleton_kept_without_batchnorm(self) -> None:
        assert batch_slices(9, 4, False)[-1] == slice(8, 9)

    def test_lone_sample(self) -> None:
        assert batch_slices(1, 4, True) == [slice(0, 1)]

    def test_empty(self) -> None:
        assert batch_slices(0, 4, True) == []


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


class TestTrain:
    def test_zero_epochs_is_identity(self, tiny_mlp: ModelSpec, rng: np.random.Generator) -> None:
        params = init_params(tiny_mlp, 1)
        out, history = train(tiny_mlp, params, _clusters(rng), TrainConfig(epochs=0))
        assert out is params
        assert history.epochs == []

    def test_deterministic(self, tiny_mlp: ModelSpec, rng: np.random.Generator) -> None:
        data = _clusters(rng)
        cfg = TrainConfig(epochs=3, batch_size=8, seed=5)
        first, h1 = train(tiny_mlp, init_params(tiny_mlp, 1), data, cfg)
        second, h2 = train(tiny_mlp, init_params(tiny_mlp, 1), data, cfg)
        assert first == second
        assert h1.losses == h2.losses

    def test_seed_changes_result(self, tiny_mlp: ModelSpec, rng: np.random.Generator) -> None:
        data = _clusters(rng)
        first, _ = train(tiny_mlp, init_params(tiny_mlp, 1), data, TrainConfig(epochs=1, batch_size=8, seed=5))
        second, _ = train(tiny_mlp, init_params(tiny_mlp, 1), data, TrainConfig(epochs=1, batch_size=8, seed=6))
        assert first != second

    def test_loss_decreases(self, tiny_mlp: ModelSpec, rng: np.random.Generator) -> None:
        cfg = TrainConfig(epochs=15, batch_size=8, adam=AdamHyper(lr=1e-2))
        _, history = train(tiny_mlp, init_params(tiny_mlp, 1), _clusters(rng), cfg)
        assert len(history.epochs) == 15
        assert history.losses[-1] < history.losses[0]
        assert all(math.isfinite(loss) for loss in history.losses)

    def test_frozen_layer_untouched(self, tiny_mlp: ModelSpec, rng: np.random.Generator) -> None:
        layers = list(tiny_mlp.layers)
        layers[0] = layers[0].model_copy(update={"frozen": True})
        spec = tiny_mlp.model_copy(update={"layers": layers})
        params = init_params(spec, 1)
        out, _ = train(spec, params, _clusters(rng), TrainConfig(epochs=2, batch_size=8))
        np.testing.assert_array_equal(out.layers[0]["weight"], params.layers[0]["weight"])
        np.testing.assert_array_equal(out.layers[0]["bias"], params.layers[0]["bias"])
        assert not np.array_equal(out.layers[3]["weight"], params.layers[3]["weight"])

    def test_on_epoch_callback(self, linear_model: ModelSpec, rng: np.random.Generator) -> None:
        data = _flat_set(rng.normal(size=(10, 3)), np.tile([1, 2], 5), 2)
        seen: list[EpochRecord] = []
        _, history = train(
            linear_model, init_params(linear_model, 1), data, TrainConfig(epochs=4), seen.append
        )
        assert [record.epoch for record in seen] == [1, 2, 3, 4]
        assert seen == history.epochs

    def test_double_precision(self, linear_model: ModelSpec, rng: np.random.Generator) -> None:
        data = _flat_set(rng.normal(size=(10, 3)), np.tile([1, 2], 5), 2)
        cfg = TrainConfig(epochs=1, precision=Precision.f64)
        out, _ = train(linear_model, init_params(linear_model, 1), data, cfg)
        assert out.dtype == np.float64

    def test_separable_set_reaches_full_accuracy(self, rng: np.random.Generator) -> None:
        spec = build_model(
            ModelVariant(name=VariantName.mlp2, window=1, pca_components=2, n_classes=2)
        )
        x = np.concatenate([rng.normal(-2.0, 0.3, (20, 2)), rng.normal(2.0, 0.3, (20, 2))])
        data = _flat_set(x, np.repeat([1, 2], 20), 2)
        _, history = train(spec, init_params(spec, 42), data, TrainConfig(epochs=30, batch_size=8))
        assert any(record.accuracy == 1.0 for record in history.epochs)


class TestTrainErrors:
    def test_empty_set(self, linear_model: ModelSpec) -> None:
        empty = _flat_set(np.zeros((0, 3)), np.zeros(0), 2)
        with pytest.raises(ValidationError):
            train(linear_model, init_params(linear_model, 1), empty, TrainConfig())

    def test_batchnorm_needs_batch_of_two(self, tiny_mlp: ModelSpec, rng: np.random.Generator) -> None:
        assert trains_batchnorm(tiny_mlp)
        with pytest.raises(ConfigError):
            train(tiny_mlp, init_params(tiny_mlp, 1), _clusters(rng), TrainConfig(batch_size=1))

    def test_batchnorm_needs_two_samples(self, tiny_mlp: ModelSpec) -> None:
        single = _flat_set(np.ones((1, 4)), np.array([1]), 3)
        with pytest.raises(BatchError):
            train(tiny_mlp, init_params(tiny_mlp, 1), single, TrainConfig())

    def test_label_beyond_model(self, linear_model: ModelSpec) -> None:
        data = _flat_set(np.ones((2, 3)), np.array([1, 3]), 3)
        with pytest.raises(LabelError):
            train(linear_model, init_params(linear_model, 1), data, TrainConfig())

    def test_geometry_mismatch(self, linear_model: ModelSpec) -> None:
        data = _flat_set(np.ones((2, 4)), np.array([1, 2]), 2)
        with pytest.raises(DimensionError):
            train(linear_model, init_params(linear_model, 1), data, TrainConfig())

    def test_divergence(self, linear_model: ModelSpec) -> None:
        params = init_params(linear_model, 1)
        weight = np.full_like(params.layers[0]["weight"], np.nan)
        poisoned = Params(layers=[{"weight": weight, "bias": params.layers[0]["bias"]}, {}])
        data = _flat_set(np.ones((4, 3)), np.array([1, 2, 1, 2]), 2)
        with pytest.raises(DivergenceError) as info:
            train(linear_model, poisoned, data, TrainConfig(epochs=2))
        assert (info.value.epoch, info.value.batch) == (0, 0)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


class TestConfusion:
    def test_counts_true_by_predicted(self) -> None:
        matrix = confusion_matrix([0, 1, 1, 0], [0, 1, 0, 0], 2)
        assert matrix.tolist() == [[2, 1], [0, 1]]

    def test_out_of_range(self) -> None:
        with pytest.raises(LabelError):
            confusion_matrix([0, 2], [0, 1], 2)

    def test_length_mismatch(self) -> None:
        with pytest.raises(DimensionError):
            confusion_matrix([0, 1], [0], 2)

    def test_accuracies(self) -> None:
        metrics = metrics_from_confusion([[3, 1], [0, 4]], 0.25)
        assert metrics.overall_accuracy == pytest.approx(7 / 8)
        assert metrics.average_accuracy == pytest.approx((0.75 + 1.0) / 2)
        assert metrics.total == 8

    def test_class_without_support(self) -> None:
        metrics = metrics_from_confusion([[2, 0, 0], [0, 0, 0], [1, 0, 1]], 0.0)
        assert metrics.per_class == [1.0, None, 0.5]
        assert metrics.average_accuracy == pytest.approx(0.75)
        assert metrics.overall_accuracy == pytest.approx(0.75)

    def test_empty(self) -> None:
        with pytest.raises(EvaluationError):
            metrics_from_confusion([[0, 0], [0, 0]], 0.0)


class TestEvaluate:
    def test_constant_prediction(self, linear_model: ModelSpec) -> None:
        data = _flat_set(np.ones((4, 3)), np.array([1, 1, 2, 2]), 2)
        metrics = evaluate(linear_model, _zero_params(linear_model), data)
        # Ties resolve to the first class.
        assert metrics.confusion == [[2, 0], [2, 0]]
        assert metrics.overall_accuracy == 0.5
        assert metrics.average_accuracy == 0.5
        assert metrics.loss == pytest.approx(math.log(2), rel=1e-5)

    def test_perfect_prediction(self, linear_model: ModelSpec) -> None:
        params = _zero_params(linear_model)
        weight = np.array([[1.0, -1.0], [0.0, 0.0], [0.0, 0.0]], dtype=np.float32)
        params = Params(layers=[{"weight": weight, "bias": params.layers[0]["bias"]}, {}])
        data = _flat_set([[1, 0, 0], [2, 0, 0], [-1, 0, 0]], np.array([1, 1, 2]), 2)
        metrics = evaluate(linear_model, params, data)
        assert metrics.overall_accuracy == 1.0
        assert metrics.per_class == [1.0, 1.0]

    def test_empty_testset(self, linear_model: ModelSpec) -> None:
        empty = _flat_set(np.zeros((0, 3)), np.zeros(0), 2)
        with pytest.raises(EvaluationError):
            evaluate(linear_model, init_params(linear_model, 1), empty)

    def test_batch_size_and_threads_do_not_matter(
        self, tiny_mlp: ModelSpec, rng: np.random.Generator
    ) -> None:
        params = init_params(tiny_mlp, 3)
        data = _clusters(rng)
        single = predict_logits(tiny_mlp, params, data.x)
        pooled = predict_logits(tiny_mlp, params, data.x, batch_size=7, threads=4)
        np.testing.assert_array_equal(single, pooled)
        assert evaluate(tiny_mlp, params, data) == evaluate(tiny_mlp, params, data, 5, 3)


# ---------------------------------------------------------------------------
# Maps
# ---------------------------------------------------------------------------


@pytest.fixture()
def map_model() -> ModelSpec:
    return ModelSpec(layers=dense_head(27, (8,), 3), input_shape=(27,), n_classes=3)


class TestPredictMap:
    def test_mask_zeroes_unlabeled(self, small_scene: Scene, map_model: ModelSpec) -> None:
        pca = fit_pca(small_scene.cube, 3)
        out = predict_map(map_model, init_params(map_model, 1), small_scene, pca, 3)
        assert out.dtype == np.uint16
        assert np.all(out[small_scene.labels == 0] == 0)
        assert np.all((out[small_scene.labels > 0] >= 1) & (out[small_scene.labels > 0] <= 3))

    def test_unmasked_covers_every_pixel(self, small_scene: Scene, map_model: ModelSpec) -> None:
        pca = fit_pca(small_scene.cube, 3)
        out = predict_map(map_model, init_params(map_model, 1), small_scene, pca, 3, mask=False)
        assert np.all(out >= 1)

    def test_threads_do_not_change_map(self, small_scene: Scene, map_model: ModelSpec) -> None:
        pca = fit_pca(small_scene.cube, 3)
        params = init_params(map_model, 1)
        single = predict_map(map_model, params, small_scene, pca, 3, mask=False)
        pooled = predict_map(map_model, params, small_scene, pca, 3, mask=False, batch_size=7, threads=3)
        np.testing.assert_array_equal(single, pooled)

    def test_pca_band_mismatch(self, small_scene: Scene, map_model: ModelSpec) -> None:
        pca = fit_pca(small_scene.cube[:, :, :4], 3)
        with pytest.raises(DimensionError):
            predict_map(map_model, init_params(map_model, 1), small_scene, pca, 3)

    def test_layout_mismatch(self, map_model: ModelSpec) -> None:
        assert input_layout(map_model, 3, 3) is PatchLayout.flat
        with pytest.raises(DimensionError):
            input_layout(map_model, 5, 3)

    def test_cube_layout(self) -> None:
        spec = build_model(ModelVariant(name=VariantName.cnn, window=3, pca_components=15, n_classes=2))
        assert input_layout(spec, 3, 15) is PatchLayout.cubes

    def test_overfit_map_matches_truth(self) -> None:
        scene = generate_synthetic_scene(
            SynthSpec(rows=16, cols=16, bands=8, n_classes=3, blob_count=4, noise_sigma=0.0)
        )
        pca = fit_pca(scene.cube, 3)
        patches = flatten_patches(
            extract_patches(apply_pca(scene.cube, pca), scene.labels, 1, scene.n_classes)
        )
        spec = ModelSpec(layers=dense_head(3, (16,), 3), input_shape=(3,), n_classes=3)
        cfg = TrainConfig(epochs=60, batch_size=16, adam=AdamHyper(lr=1e-2))
        params, _ = train(spec, init_params(spec, 42), patches, cfg)
        out = predict_map(spec, params, scene, pca, 1)
        np.testing.assert_array_equal(out, scene.labels)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def _report(variant: str, oa: float) -> dict:
    return {"oa": oa, "aa": oa, "model": {"variant": variant, "architecture": [10, 2], "trainable": 12825}}


class TestReports:
    def test_report_fields(self, linear_model: ModelSpec) -> None:
        metrics = metrics_from_confusion([[1, 0], [1, 2]], 0.5)
        report = metrics_report(
            metrics, {"split": 42}, model=model_summary(linear_model, VariantName.mlp2)
        )
        assert report["oa"] == 0.75
        assert report["seeds"] == {"split": 42}
        assert report["history"] == []
        assert report["model"] == {
            "variant": "mlp2",
            "architecture": [3, 2],
            "trainable": 8,
            "frozen": 0,
        }

    def test_history_has_no_wall_time(self, linear_model: ModelSpec, rng: np.random.Generator) -> None:
        data = _flat_set(rng.normal(size=(6, 3)), np.tile([1, 2], 3), 2)
        _, history = train(linear_model, init_params(linear_model, 1), data, TrainConfig(epochs=2))
        report = metrics_report(evaluate(linear_model, init_params(linear_model, 1), data), {}, history)
        assert [entry["epoch"] for entry in report["history"]] == [1, 2]
        assert all("seconds" not in entry for entry in report["history"])

    def test_write_read(self, tmp_path: Path) -> None:
        path = tmp_path / "m.json"
        report = metrics_report(metrics_from_confusion([[1, 0], [0, 1]], 0.1), {"model": 1})
        write_metrics(report, path)
        assert read_metrics(path) == json.loads(json.dumps(report))
        first = path.read_bytes()
        write_metrics(report, path)
        assert path.read_bytes() == first

    def test_read_rejects_other_json(self, tmp_path: Path) -> None:
        path = tmp_path / "m.json"
        path.write_text('{"accuracy": 1}')
        with pytest.raises(ConfigError):
            read_metrics(path)
        path.write_text("not json")
        with pytest.raises(ConfigError):
            read_metrics(path)
        with pytest.raises(IoError):
            read_metrics(tmp_path / "absent.json")

    def test_table_lists_classes(self) -> None:
        metrics = metrics_from_confusion([[2, 0, 0], [0, 0, 0], [1, 0, 1]], 0.2)
        table = format_metrics_table(metrics, ["corn", "oats", "wheat"])
        assert "corn" in table and "wheat" in table
        assert "-" in table.splitlines()[2]
        assert table.splitlines()[-3].startswith("OA")

    def test_ordering(self) -> None:
        reports = [_report("mlp2", 0.99), _report("mlp3", 0.97), _report("mlp1", 0.95)]
        assert ordering_holds(reports) is True
        assert ordering_holds(list(reversed([_report("mlp2", 0.9), _report("mlp3", 0.97), _report("mlp1", 0.95)]))) is False
        assert ordering_holds(reports[:2]) is None

    def test_compare_table(self) -> None:
        table = compare_table({"run-a": _report("mlp2", 0.9871)})
        assert "12,825" in table
        assert "98.71" in table
        assert "(10,2)" in table


# ---------------------------------------------------------------------------
# Desk-scale end to end
# ---------------------------------------------------------------------------


DESK_SCENE = SynthSpec(rows=32, cols=32, bands=16, n_classes=4, blob_count=8, noise_sigma=0.05, seed=7)


@pytest.mark.slow
class TestDeskScale:
    def _source(self) -> tuple[ModelSpec, Params, PcaModel, float]:
        scene = generate_synthetic_scene(DESK_SCENE)
        pca = fit_pca(scene.cube, 8)
        trainset, testset = _desk_split(scene, pca, 5)
        spec = build_model(ModelVariant(name=VariantName.mlp2, window=5, pca_components=8, n_classes=4))
        params, _ = train(spec, init_params(spec, 42), trainset, TrainConfig(epochs=30, batch_size=32))
        return spec, params, pca, evaluate(spec, params, testset).overall_accuracy

    def test_mlp2_reaches_target(self) -> None:
        *_, oa = self._source()
        assert oa >= 0.99

    def test_transfer_to_other_scene(self) -> None:
        spec, params, pca, _ = self._source()
        target = generate_synthetic_scene(DESK_SCENE.model_copy(update={"seed": 11}))
        trainset, testset = _desk_split(target, pca, 5)
        new_spec, new_params = transfer_surgery(spec, params, published_surgery(VariantName.mlp2, spec, 4))
        before = frozen_digest(new_spec, new_params)
        new_params, _ = train(new_spec, new_params, trainset, TrainConfig(epochs=10, batch_size=32))
        assert frozen_digest(new_spec, new_params) == before
        assert evaluate(new_spec, new_params, testset).overall_accuracy >= 0.90

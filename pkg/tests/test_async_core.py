"""Tests for the asyncio wrapper around training, evaluation and maps."""

from __future__ import annotations

import numpy as np
import pytest

from aumai_async_core import AsyncServiceConfig

from aumai_hsi_transfer.architectures import dense_head
from aumai_hsi_transfer.async_core import AsyncTrainingService
from aumai_hsi_transfer.autodiff_nn import init_params
from aumai_hsi_transfer.errors import EvaluationError, ValidationError
from aumai_hsi_transfer.linalg_prep import (
    PatchSet,
    apply_pca,
    extract_patches,
    fit_pca,
    flatten_patches,
)
from aumai_hsi_transfer.models import ModelSpec, PatchLayout, TrainConfig
from aumai_hsi_transfer.scene_io import Scene
from aumai_hsi_transfer.train_eval import evaluate, predict_map, train


def _patches(scene: Scene) -> tuple[ModelSpec, PatchSet]:
    pca = fit_pca(scene.cube, 2)
    patches = flatten_patches(
        extract_patches(apply_pca(scene.cube, pca), scene.labels, 1, scene.n_classes)
    )
    spec = ModelSpec(layers=dense_head(2, (4,), 3), input_shape=(2,), n_classes=3)
    return spec, patches


def _empty(features: int, n_classes: int) -> PatchSet:
    return PatchSet(
        x=np.zeros((0, features), dtype=np.float32),
        y=np.zeros(0, dtype=np.int64),
        positions=np.zeros((0, 2), dtype=np.int64),
        window=1,
        bands=features,
        n_classes=n_classes,
        layout=PatchLayout.flat,
    )


# ---------------------------------------------------------------------------
# Fixtures
# ---------------------------------------------------------------------------


@pytest.fixture()
async def service() -> AsyncTrainingService:
    """Return a started AsyncTrainingService for use in tests."""
    config = AsyncServiceConfig(
        name="test-training-service",
        health_check_interval_seconds=0.0,
    )
    svc = AsyncTrainingService(config)
    await svc.start()
    yield svc
    await svc.stop()


# ---------------------------------------------------------------------------
# Lifecycle tests
# ---------------------------------------------------------------------------


class TestLifecycle:
    async def test_start_transitions_to_running(self) -> None:
        svc = AsyncTrainingService()
        await svc.start()
        assert svc.status.state == "running"
        await svc.stop()

    async def test_stop_transitions_to_stopped(self) -> None:
        svc = AsyncTrainingService()
        await svc.start()
        await svc.stop()
        assert svc.status.state == "stopped"

    async def test_context_manager(self) -> None:
        async with AsyncTrainingService() as svc:
            assert svc.status.state == "running"
            assert await svc.health_check() is True

    async def test_default_config_name(self) -> None:
        assert AsyncTrainingService().config.name == "aumai-hsi-transfer"

    async def test_threads_at_least_one(self) -> None:
        assert AsyncTrainingService(threads=0).threads == 1
        assert AsyncTrainingService(threads=4).threads == 4

    async def test_status_has_name(self, service: AsyncTrainingService) -> None:
        assert service.status.name == "test-training-service"


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


class TestTrain:
    async def test_matches_synchronous_train(
        self, service: AsyncTrainingService, small_scene: Scene
    ) -> None:
        spec, patches = _patches(small_scene)
        cfg = TrainConfig(epochs=2, batch_size=16)
        params, history = await service.train(spec, init_params(spec, 1), patches, cfg)
        expected, expected_history = train(spec, init_params(spec, 1), patches, cfg)
        assert params == expected
        assert history.losses == expected_history.losses

    async def test_emits_progress_events(
        self, service: AsyncTrainingService, small_scene: Scene
    ) -> None:
        spec, patches = _patches(small_scene)
        events: list[tuple[str, dict]] = []

        def record(name: str):
            async def handler(**kwargs: object) -> None:
                events.append((name, dict(kwargs)))

            return handler

        for name in ("training.started", "training.epoch_completed", "training.completed"):
            service.emitter.on(name, record(name))
        await service.train(spec, init_params(spec, 1), patches, TrainConfig(epochs=3))

        names = [name for name, _ in events]
        assert names[0] == "training.started"
        assert names[-1] == "training.completed"
        assert names.count("training.epoch_completed") == 3
        assert events[0][1]["samples"] == len(patches)
        epochs = [kw["epoch"] for name, kw in events if name == "training.epoch_completed"]
        assert epochs == [1, 2, 3]
        assert events[-1][1]["epochs"] == 3

    async def test_request_count(
        self, service: AsyncTrainingService, small_scene: Scene
    ) -> None:
        spec, patches = _patches(small_scene)
        initial = service.status.request_count
        await service.train(spec, init_params(spec, 1), patches, TrainConfig(epochs=0))
        assert service.status.request_count == initial + 1

    async def test_failure_emits_event(self, service: AsyncTrainingService) -> None:
        spec = ModelSpec(layers=dense_head(2, (4,), 3), input_shape=(2,), n_classes=3)
        received: list[dict] = []

        async def handler(**kwargs: object) -> None:
            received.append(dict(kwargs))

        service.emitter.on("training.failed", handler)
        initial = service.status.error_count
        with pytest.raises(ValidationError):
            await service.train(spec, init_params(spec, 1), _empty(2, 3), TrainConfig())
        assert service.status.error_count == initial + 1
        assert len(received) == 1
        assert received[0]["category"] == "validation"
        assert received[0]["exit_code"] == 2


# ---------------------------------------------------------------------------
# Evaluation and maps
# ---------------------------------------------------------------------------


class TestEvaluateAndMap:
    async def test_evaluate_event(
        self, service: AsyncTrainingService, small_scene: Scene
    ) -> None:
        spec, patches = _patches(small_scene)
        params = init_params(spec, 1)
        received: list[dict] = []

        async def handler(**kwargs: object) -> None:
            received.append(dict(kwargs))

        service.emitter.on("evaluation.completed", handler)
        metrics = await service.evaluate(spec, params, patches)
        assert metrics == evaluate(spec, params, patches)
        assert received[0]["samples"] == len(patches)
        assert received[0]["oa"] == metrics.overall_accuracy

    async def test_evaluate_failure_counts_error(self, service: AsyncTrainingService) -> None:
        spec = ModelSpec(layers=dense_head(2, (4,), 3), input_shape=(2,), n_classes=3)
        initial = service.status.error_count
        with pytest.raises(EvaluationError):
            await service.evaluate(spec, init_params(spec, 1), _empty(2, 3))
        assert service.status.error_count == initial + 1

    async def test_map(self, small_scene: Scene) -> None:
        spec, _ = _patches(small_scene)
        params = init_params(spec, 1)
        pca = fit_pca(small_scene.cube, 2)
        received: list[dict] = []

        async def handler(**kwargs: object) -> None:
            received.append(dict(kwargs))

        async with AsyncTrainingService(threads=2) as svc:
            svc.emitter.on("map.completed", handler)
            labels = await svc.predict_map(spec, params, small_scene, pca, 1)
        np.testing.assert_array_equal(labels, predict_map(spec, params, small_scene, pca, 1))
        assert received[0]["rows"] == small_scene.rows
        assert received[0]["labeled"] == int(np.count_nonzero(small_scene.labels))

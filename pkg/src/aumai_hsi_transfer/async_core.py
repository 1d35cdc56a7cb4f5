"""Async API for aumai-hsi-transfer powered by aumai-async-core."""

from __future__ import annotations

import asyncio
from concurrent.futures import Future
from typing import Any

import numpy as np
import numpy.typing as npt

from aumai_async_core import AsyncEventEmitter, AsyncService, AsyncServiceConfig

from aumai_hsi_transfer.autodiff_nn import Params
from aumai_hsi_transfer.errors import classify_exception
from aumai_hsi_transfer.linalg_prep import PatchSet, PcaModel
from aumai_hsi_transfer.models import EpochRecord, History, Metrics, ModelSpec, TrainConfig
from aumai_hsi_transfer.scene_io import Scene
from aumai_hsi_transfer.train_eval import evaluate, predict_map, train


class AsyncTrainingService(AsyncService):
    """Runs training, evaluation and map prediction off the event loop.

    The numeric work happens in worker threads; progress is reported through
    an :class:`AsyncEventEmitter`.

    Event names emitted:

    - ``"training.started"`` -- keyword args ``samples``, ``epochs``,
      ``batch_size``.
    - ``"training.epoch_completed"`` -- ``epoch``, ``loss``, ``accuracy``,
      ``seconds``; emitted while training is still running.
    - ``"training.completed"`` -- ``epochs``, ``final_loss``.
    - ``"training.failed"`` -- ``category``, ``exit_code``, ``message``.
    - ``"evaluation.completed"`` -- ``oa``, ``aa``, ``loss``, ``samples``.
    - ``"map.completed"`` -- ``rows``, ``cols``, ``labeled``.

    Example::

        async with AsyncTrainingService() as service:
            params, history = await service.train(spec, params, trainset, cfg)
            metrics = await service.evaluate(spec, params, testset)
    """

    def __init__(self, config: AsyncServiceConfig | None = None, threads: int = 1) -> None:
        effective_config = config or AsyncServiceConfig(
            name="aumai-hsi-transfer",
            health_check_interval_seconds=0.0,
        )
        super().__init__(effective_config)
        self._emitter: AsyncEventEmitter = AsyncEventEmitter()
        self._threads = max(1, threads)

    @property
    def emitter(self) -> AsyncEventEmitter:
        return self._emitter

    @property
    def threads(self) -> int:
        return self._threads

    async def on_start(self) -> None:
        """Nothing to warm up; the engine is stateless between calls."""

    async def on_stop(self) -> None:
        self._emitter.remove_all_listeners()

    async def health_check(self) -> bool:
        return self.status.state == "running"

    async def _failed(self, exc: BaseException) -> None:
        await self.increment_error_count()
        kind = classify_exception(exc)
        await self._emitter.emit(
            "training.failed",
            category=kind.category.value,
            exit_code=kind.exit_code,
            message=str(exc),
        )

    async def train(
        self,
        spec: ModelSpec,
        params: Params,
        trainset: PatchSet,
        cfg: TrainConfig,
    ) -> tuple[Params, History]:
        """Async :func:`~aumai_hsi_transfer.train_eval.train` with per-epoch events."""
        await self.increment_request_count()
        loop = asyncio.get_running_loop()
        pending: list[Future[Any]] = []

        def on_epoch(record: EpochRecord) -> None:
            pending.append(
                asyncio.run_coroutine_threadsafe(
                    self._emitter.emit(
                        "training.epoch_completed",
                        epoch=record.epoch,
                        loss=record.loss,
                        accuracy=record.accuracy,
                        seconds=record.seconds,
                    ),
                    loop,
                )
            )

        await self._emitter.emit(
            "training.started",
            samples=len(trainset),
            epochs=cfg.epochs,
            batch_size=cfg.batch_size,
        )
        try:
            result = await asyncio.to_thread(train, spec, params, trainset, cfg, on_epoch)
        except Exception as exc:
            await asyncio.gather(*(asyncio.wrap_future(f) for f in pending))
            await self._failed(exc)
            raise
        await asyncio.gather(*(asyncio.wrap_future(f) for f in pending))
        history = result[1]
        await self._emitter.emit(
            "training.completed",
            epochs=len(history.epochs),
            final_loss=history.losses[-1] if history.epochs else None,
        )
        return result

    async def evaluate(self, spec: ModelSpec, params: Params, testset: PatchSet) -> Metrics:
        await self.increment_request_count()
        try:
            metrics = await asyncio.to_thread(
                evaluate, spec, params, testset, threads=self._threads
            )
        except Exception:
            await self.increment_error_count()
            raise
        await self._emitter.emit(
            "evaluation.completed",
            oa=metrics.overall_accuracy,
            aa=metrics.average_accuracy,
            loss=metrics.loss,
            samples=metrics.total,
        )
        return metrics

    async def predict_map(
        self,
        spec: ModelSpec,
        params: Params,
        scene: Scene,
        pca: PcaModel,
        window: int,
        mask: bool = True,
    ) -> npt.NDArray[np.uint16]:
        await self.increment_request_count()
        try:
            labels = await asyncio.to_thread(
                predict_map, spec, params, scene, pca, window, mask, threads=self._threads
            )
        except Exception:
            await self.increment_error_count()
            raise
        await self._emitter.emit(
            "map.completed",
            rows=scene.rows,
            cols=scene.cols,
            labeled=int(np.count_nonzero(labels)),
        )
        return labels


__all__ = ["AsyncTrainingService"]

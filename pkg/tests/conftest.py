"""Shared test fixtures."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from aumai_hsi_transfer.architectures import dense_head
from aumai_hsi_transfer.models import ModelSpec, SynthSpec
from aumai_hsi_transfer.scene_io import Scene, generate_synthetic_scene, save_scene


@pytest.fixture()
def small_synth() -> SynthSpec:
    return SynthSpec(rows=16, cols=16, bands=8, n_classes=3, blob_count=4, seed=7)


@pytest.fixture()
def small_scene(small_synth: SynthSpec) -> Scene:
    return generate_synthetic_scene(small_synth)


@pytest.fixture()
def scene_file(tmp_path: Path, small_scene: Scene) -> Path:
    path = tmp_path / "scene.hsc"
    save_scene(small_scene, path)
    return path


@pytest.fixture()
def tiny_mlp() -> ModelSpec:
    """4 -> 6 (batch norm, relu) -> 3 softmax."""
    return ModelSpec(
        layers=dense_head(4, (6,), 3, batchnorm=True),
        input_shape=(4,),
        n_classes=3,
    )


@pytest.fixture()
def linear_model() -> ModelSpec:
    return ModelSpec(
        layers=dense_head(3, (), 2),
        input_shape=(3,),
        n_classes=2,
    )


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)

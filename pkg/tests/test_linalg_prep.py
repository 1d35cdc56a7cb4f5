"""Tests for PCA, patch extraction, flattening and splits."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aumai_hsi_transfer.errors import (
    ConfigError,
    DimensionError,
    FormatError,
    LengthError,
    SplitError,
)
from aumai_hsi_transfer.linalg_prep import (
    PCA_MAGIC,
    PatchSet,
    PcaModel,
    apply_pca,
    decode_pca,
    encode_pca,
    extract_patches,
    fit_pca,
    fix_signs,
    flatten_patches,
    jacobi_eigh,
    load_pca,
    reconstruction_error,
    save_pca,
    split_indices,
    split_train_test,
    truncate_pca,
    window_view,
)
from aumai_hsi_transfer.models import PatchLayout, SplitSpec
from aumai_hsi_transfer.scene_io import Scene


# ---------------------------------------------------------------------------
# Jacobi eigendecomposition
# ---------------------------------------------------------------------------


class TestJacobi:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(min_value=1, max_value=8), st.integers(min_value=0, max_value=10_000))
    def test_matches_dense_solver(self, n: int, seed: int) -> None:
        generator = np.random.default_rng(seed)
        samples = generator.normal(size=(n + 3, n))
        covariance = np.cov(samples, rowvar=False).reshape(n, n)
        values, vectors = jacobi_eigh(covariance)
        order = np.argsort(-values)
        expected_values, expected_vectors = np.linalg.eigh(covariance)
        expected_order = np.argsort(-expected_values)
        np.testing.assert_allclose(
            values[order], expected_values[expected_order], atol=1e-6
        )
        gaps = np.diff(np.sort(expected_values))
        if n == 1 or gaps.min() > 1e-3:
            np.testing.assert_allclose(
                fix_signs(vectors[:, order]),
                fix_signs(expected_vectors[:, expected_order]),
                atol=1e-6,
            )

    def test_eigenvectors_orthonormal(self, rng: np.random.Generator) -> None:
        samples = rng.normal(size=(20, 6))
        _, vectors = jacobi_eigh(samples.T @ samples)
        np.testing.assert_allclose(vectors.T @ vectors, np.eye(6), atol=1e-10)

    def test_zero_matrix(self) -> None:
        values, vectors = jacobi_eigh(np.zeros((3, 3)))
        assert np.all(values == 0)
        assert np.array_equal(vectors, np.eye(3))

    def test_non_square_rejected(self) -> None:
        with pytest.raises(DimensionError):
            jacobi_eigh(np.zeros((2, 3)))


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------


class TestFitPca:
    def test_rank_one_line(self) -> None:
        s = np.arange(6, dtype=np.float64)
        cube = np.stack([s, s], axis=1).reshape(6, 1, 2)
        pca = fit_pca(cube, 2)
        np.testing.assert_allclose(pca.components[:, 0], [math.sqrt(0.5)] * 2, atol=1e-5)
        assert pca.eigenvalues[1] == pytest.approx(0.0, abs=1e-12)
        assert pca.eigenvalues[0] == pytest.approx(2 * np.var(s, ddof=1))

    def test_eigenvalues_sorted(self, small_scene: Scene) -> None:
        pca = fit_pca(small_scene.cube, 5)
        assert np.all(np.diff(pca.eigenvalues) <= 0)

    def test_sign_convention(self, small_scene: Scene) -> None:
        pca = fit_pca(small_scene.cube, 4)
        for column in pca.components.T:
            assert column[np.argmax(np.abs(column))] > 0

    def test_too_many_components(self, small_scene: Scene) -> None:
        with pytest.raises(DimensionError):
            fit_pca(small_scene.cube, small_scene.bands + 1)

    def test_zero_components(self, small_scene: Scene) -> None:
        with pytest.raises(ConfigError):
            fit_pca(small_scene.cube, 0)

    def test_constant_cube_is_valid(self) -> None:
        pca = fit_pca(np.ones((3, 3, 4)), 2)
        assert np.all(pca.eigenvalues == 0)
        assert pca.n_components == 2

    def test_full_rank_reconstructs(self, small_scene: Scene) -> None:
        pca = fit_pca(small_scene.cube, small_scene.bands)
        assert reconstruction_error(small_scene.cube, pca) < 1e-10

    def test_standardize_reconstructs(self, small_scene: Scene) -> None:
        pca = fit_pca(small_scene.cube, small_scene.bands, standardize=True)
        assert pca.scales is not None
        assert reconstruction_error(small_scene.cube, pca) < 1e-10

    def test_truncate(self, small_scene: Scene) -> None:
        pca = fit_pca(small_scene.cube, 6)
        short = truncate_pca(pca, 3)
        assert short == fit_pca(small_scene.cube, 3)
        with pytest.raises(DimensionError):
            truncate_pca(pca, 7)


class TestApplyPca:
    def test_identity_projection(self, rng: np.random.Generator) -> None:
        cube = rng.normal(size=(3, 4, 5))
        pca = PcaModel(band_means=np.zeros(5), components=np.eye(5), eigenvalues=np.ones(5))
        np.testing.assert_array_equal(apply_pca(cube, pca), cube)

    def test_output_shape(self, small_scene: Scene) -> None:
        pca = fit_pca(small_scene.cube, 3)
        assert apply_pca(small_scene.cube, pca).shape == (16, 16, 3)

    def test_band_mismatch(self, small_scene: Scene) -> None:
        pca = fit_pca(small_scene.cube, 3)
        with pytest.raises(DimensionError):
            apply_pca(small_scene.cube[:, :, :4], pca)

    def test_reduced_is_centred(self, small_scene: Scene) -> None:
        reduced = apply_pca(small_scene.cube, fit_pca(small_scene.cube, 3))
        np.testing.assert_allclose(reduced.reshape(-1, 3).mean(axis=0), 0.0, atol=1e-6)


class TestPcaContainer:
    def test_round_trip(self, tmp_path: Path, small_scene: Scene) -> None:
        pca = fit_pca(small_scene.cube, 4)
        path = tmp_path / "p.pca"
        save_pca(pca, path)
        assert load_pca(path) == pca

    def test_round_trip_standardized(self, small_scene: Scene) -> None:
        pca = fit_pca(small_scene.cube, 4, standardize=True)
        assert decode_pca(encode_pca(pca)) == pca

    def test_bad_magic(self, small_scene: Scene) -> None:
        data = encode_pca(fit_pca(small_scene.cube, 2))
        with pytest.raises(FormatError):
            decode_pca(b"NOTPCA" + data[len(PCA_MAGIC) :])

    def test_truncated(self, small_scene: Scene) -> None:
        data = encode_pca(fit_pca(small_scene.cube, 2))
        with pytest.raises(LengthError):
            decode_pca(data[:-8])


# ---------------------------------------------------------------------------
# Patches
# ---------------------------------------------------------------------------


class TestExtractPatches:
    def test_window_one_is_pixel(self, small_scene: Scene) -> None:
        patches = extract_patches(small_scene.cube, small_scene.labels, 1)
        rows, cols = patches.positions.T
        np.testing.assert_array_equal(
            patches.x[:, 0, :, 0, 0], small_scene.cube[rows, cols]
        )

    def test_one_sample_per_labeled_pixel(self, small_scene: Scene) -> None:
        patches = extract_patches(small_scene.cube, small_scene.labels, 5, 3)
        assert len(patches) == small_scene.labeled_count
        assert patches.x.shape == (len(patches), 1, 8, 5, 5)
        assert patches.n_classes == 3

    def test_row_major_order(self, small_scene: Scene) -> None:
        patches = extract_patches(small_scene.cube, small_scene.labels, 3)
        flat = patches.positions[:, 0] * small_scene.cols + patches.positions[:, 1]
        assert np.all(np.diff(flat) > 0)

    def test_corner_zero_padding(self) -> None:
        cube = np.arange(1, 19, dtype=np.float64).reshape(3, 3, 2)
        labels = np.zeros((3, 3), dtype=np.uint16)
        labels[0, 0] = 1
        patches = extract_patches(cube, labels, 3)
        patch = patches.x[0, 0]
        assert np.all(patch[:, 0, :] == 0)
        assert np.all(patch[:, :, 0] == 0)
        assert patch[0, 1, 1] == cube[0, 0, 0]

    def test_even_window(self, small_scene: Scene) -> None:
        with pytest.raises(ConfigError):
            extract_patches(small_scene.cube, small_scene.labels, 4)

    def test_window_view_shape(self) -> None:
        assert window_view(np.zeros((4, 5, 2)), 3).shape == (4, 5, 2, 3, 3)


class TestFlatten:
    @pytest.mark.parametrize(("window", "bands", "length"), [(25, 30, 18750), (5, 30, 750)])
    def test_feature_length(self, window: int, bands: int, length: int) -> None:
        cube = np.zeros((window, window, bands))
        labels = np.zeros((window, window), dtype=np.uint16)
        labels[window // 2, window // 2] = 1
        flat = flatten_patches(extract_patches(cube, labels, window))
        assert flat.x.shape == (1, length)
        assert flat.layout is PatchLayout.flat

    def test_row_col_band_order(self) -> None:
        cube = np.arange(9 * 2, dtype=np.float64).reshape(3, 3, 2)
        labels = np.zeros((3, 3), dtype=np.uint16)
        labels[1, 1] = 1
        flat = flatten_patches(extract_patches(cube, labels, 3))
        np.testing.assert_array_equal(flat.x[0], cube.reshape(-1))

    def test_flat_is_noop(self, small_scene: Scene) -> None:
        flat = flatten_patches(extract_patches(small_scene.cube, small_scene.labels, 3))
        assert flatten_patches(flat) is flat


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


def _patchset(y: list[int], n_classes: int) -> PatchSet:
    count = len(y)
    return PatchSet(
        x=np.arange(count, dtype=np.float32).reshape(count, 1),
        y=np.asarray(y, dtype=np.int64),
        positions=np.zeros((count, 2), dtype=np.int64),
        window=1,
        bands=1,
        n_classes=n_classes,
        layout=PatchLayout.flat,
    )


class TestSplit:
    def test_indian_pines_sizes(self) -> None:
        train, test = split_indices(np.ones(10249, dtype=np.int64), SplitSpec(train_fraction=0.7))
        assert (train.shape[0], test.shape[0]) == (7174, 3075)

    def test_two_samples_half(self) -> None:
        train, test = split_train_test(_patchset([1, 2], 2), SplitSpec(train_fraction=0.5))
        assert (len(train), len(test)) == (1, 1)

    def test_partition(self) -> None:
        train, test = split_indices(np.ones(50), SplitSpec(train_fraction=0.6, seed=3))
        assert sorted(np.concatenate([train, test]).tolist()) == list(range(50))

    def test_deterministic(self) -> None:
        spec = SplitSpec(train_fraction=0.4, seed=9)
        first = split_indices(np.ones(30), spec)
        second = split_indices(np.ones(30), spec)
        assert all(np.array_equal(a, b) for a, b in zip(first, second))

    def test_stratified_per_class(self) -> None:
        y = [1] * 10 + [2] * 5 + [3] * 7
        spec = SplitSpec(train_fraction=0.6, seed=1, stratified=True)
        train, test = split_train_test(_patchset(y, 3), spec)
        counts = np.bincount(train.y, minlength=4)[1:]
        assert counts.tolist() == [6, 3, 4]
        assert len(train) + len(test) == len(y)

    def test_stratified_keeps_shuffle_order(self) -> None:
        y = [1, 2] * 10
        spec = SplitSpec(train_fraction=0.5, seed=4, stratified=True)
        train, _ = split_indices(np.asarray(y), spec)
        order = split_indices(np.asarray(y), spec.model_copy(update={"stratified": False}))
        full = np.concatenate(order)
        rank = {int(index): position for position, index in enumerate(full)}
        assert [rank[int(i)] for i in train] == sorted(rank[int(i)] for i in train)

    def test_stratified_names_starved_class(self) -> None:
        spec = SplitSpec(train_fraction=0.5, stratified=True)
        with pytest.raises(SplitError, match="class 2"):
            split_indices(np.asarray([1, 1, 1, 2]), spec)

    def test_empty_train(self) -> None:
        with pytest.raises(SplitError):
            split_indices(np.ones(3), SplitSpec(train_fraction=0.2))

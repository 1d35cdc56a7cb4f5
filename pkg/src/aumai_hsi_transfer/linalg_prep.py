"""Spectral reduction (PCA via cyclic Jacobi), patch cubes, flattening, splits."""

from __future__ import annotations

import json
import logging
import math
import struct
from pathlib import Path
from typing import Any, Final

import numpy as np
import numpy.typing as npt
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, model_validator

from aumai_hsi_transfer.errors import (
    ConfigError,
    DimensionError,
    FormatError,
    IoError,
    LengthError,
    SplitError,
)
from aumai_hsi_transfer.models import PatchLayout, SplitSpec
from aumai_hsi_transfer.rng import Pcg32

logger = logging.getLogger(__name__)

PCA_MAGIC: Final = b"HSPCA1"
_U32 = struct.Struct("<I")

JACOBI_TOLERANCE: Final = 1e-10
JACOBI_MAX_SWEEPS: Final = 100

# ---------------------------------------------------------------------------
# Symmetric eigendecomposition
# ---------------------------------------------------------------------------


def jacobi_eigh(
    matrix: npt.ArrayLike,
    tolerance: float = JACOBI_TOLERANCE,
    max_sweeps: int = JACOBI_MAX_SWEEPS,
) -> tuple[npt.NDArray[np.float64], npt.NDArray[np.float64]]:
    """Eigenvalues and eigenvectors (columns) of a symmetric matrix.

    Cyclic row-by-row Jacobi rotations until the off-diagonal Frobenius norm
    drops below ``tolerance * ||A||_F`` or ``max_sweeps`` sweeps have run.
    Results are unsorted.
    """
    a = np.array(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {a.shape}")
    n = a.shape[0]
    vectors = np.eye(n)
    scale = float(np.linalg.norm(a))
    if scale == 0.0 or n == 1:
        return np.diag(a).copy(), vectors
    limit = tolerance * scale

    for sweep in range(max_sweeps):
        off = math.sqrt(max(float(np.sum(a * a) - np.sum(np.diag(a) ** 2)), 0.0))
        if off < limit:
            logger.debug("jacobi converged after %d sweeps", sweep)
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + math.hypot(theta, 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c

                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0

                vec_p = vectors[:, p].copy()
                vec_q = vectors[:, q].copy()
                vectors[:, p] = c * vec_p - s * vec_q
                vectors[:, q] = s * vec_p + c * vec_q
    else:
        logger.warning("jacobi stopped after %d sweeps without converging", max_sweeps)

    return np.diag(a).copy(), vectors


def fix_signs(vectors: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    """Flip each column so its largest-magnitude entry is positive."""
    out = vectors.copy()
    for column in range(out.shape[1]):
        pivot = int(np.argmax(np.abs(out[:, column])))
        if out[pivot, column] < 0:
            out[:, column] = -out[:, column]
    return out


# ---------------------------------------------------------------------------
# PCA model
# ---------------------------------------------------------------------------


class PcaModel(BaseModel):
    """Band means, orthonormal projection basis (bands x components), eigenvalues.

    ``scales`` is ``None`` unless the model was fitted with standardization.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    band_means: np.ndarray
    components: np.ndarray
    eigenvalues: np.ndarray
    scales: np.ndarray | None = None

    @model_validator(mode="after")
    def _shapes_agree(self) -> PcaModel:
        bands = self.band_means.shape[0]
        if self.components.shape[0] != bands:
            raise ValueError(
                f"components have {self.components.shape[0]} rows for {bands} bands"
            )
        if self.eigenvalues.shape != (self.components.shape[1],):
            raise ValueError("one eigenvalue per component is required")
        if self.scales is not None and self.scales.shape != (bands,):
            raise ValueError("scales must have one entry per band")
        return self

    @property
    def bands(self) -> int:
        return int(self.band_means.shape[0])

    @property
    def n_components(self) -> int:
        return int(self.components.shape[1])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PcaModel):
            return NotImplemented
        same_scales = (self.scales is None and other.scales is None) or (
            self.scales is not None
            and other.scales is not None
            and np.array_equal(self.scales, other.scales)
        )
        return (
            same_scales
            and np.array_equal(self.band_means, other.band_means)
            and np.array_equal(self.components, other.components)
            and np.array_equal(self.eigenvalues, other.eigenvalues)
        )

    __hash__ = None  # type: ignore[assignment]


def _pixels(cube: npt.ArrayLike) -> npt.NDArray[np.float64]:
    array = np.asarray(cube, dtype=np.float64)
    if array.ndim != 3:
        raise DimensionError(f"expected a rank-3 cube, got shape {array.shape}")
    return array.reshape(-1, array.shape[2])


def fit_pca(cube: npt.ArrayLike, n_components: int, standardize: bool = False) -> PcaModel:
    """Fit PCA on every pixel of *cube* (covariance divisor N-1)."""
    pixels = _pixels(cube)
    count, bands = pixels.shape
    if n_components < 1:
        raise ConfigError(f"n_components must be positive, got {n_components}")
    if n_components > bands:
        raise DimensionError(f"cannot keep {n_components} components of {bands} bands")
    if not np.all(np.isfinite(pixels)):
        raise DimensionError("cube contains non-finite values")

    means = pixels.mean(axis=0)
    centred = pixels - means
    scales = None
    if standardize:
        scales = centred.std(axis=0, ddof=1) if count > 1 else np.ones(bands)
        scales = np.where(scales > 0, scales, 1.0)
        centred = centred / scales
    covariance = (
        centred.T @ centred / (count - 1) if count > 1 else np.zeros((bands, bands))
    )

    values, vectors = jacobi_eigh(covariance)
    order = np.argsort(-values, kind="stable")[:n_components]
    eigenvalues = np.maximum(values[order], 0.0)
    components = fix_signs(vectors[:, order])

    total = float(np.trace(covariance))
    if total > 0:
        logger.info(
            "pca kept %d/%d components, explained variance %.4f",
            n_components,
            bands,
            float(eigenvalues.sum()) / total,
        )
    return PcaModel(
        band_means=means, components=components, eigenvalues=eigenvalues, scales=scales
    )


def apply_pca(cube: npt.ArrayLike, pca: PcaModel) -> npt.NDArray[np.float64]:
    """Project every pixel: ``components.T @ (x - means)``."""
    array = np.asarray(cube, dtype=np.float64)
    if array.ndim != 3 or array.shape[2] != pca.bands:
        raise DimensionError(
            f"cube has shape {array.shape}, PCA expects {pca.bands} bands"
        )
    centred = array.reshape(-1, pca.bands) - pca.band_means
    if pca.scales is not None:
        centred = centred / pca.scales
    reduced = centred @ pca.components
    return reduced.reshape(array.shape[0], array.shape[1], pca.n_components)


def reconstruct(reduced: npt.ArrayLike, pca: PcaModel) -> npt.NDArray[np.float64]:
    """Map a reduced cube back to band space."""
    array = np.asarray(reduced, dtype=np.float64)
    if array.ndim != 3 or array.shape[2] != pca.n_components:
        raise DimensionError(
            f"reduced cube has shape {array.shape}, PCA has {pca.n_components} components"
        )
    pixels = array.reshape(-1, pca.n_components) @ pca.components.T
    if pca.scales is not None:
        pixels = pixels * pca.scales
    pixels = pixels + pca.band_means
    return pixels.reshape(array.shape[0], array.shape[1], pca.bands)


def reconstruction_error(cube: npt.ArrayLike, pca: PcaModel) -> float:
    """Mean squared error of projecting *cube* and mapping it back."""
    original = np.asarray(cube, dtype=np.float64)
    restored = reconstruct(apply_pca(original, pca), pca)
    return float(np.mean((original - restored) ** 2))


def truncate_pca(pca: PcaModel, n_components: int) -> PcaModel:
    """Keep only the leading *n_components* of a fitted model."""
    if not 1 <= n_components <= pca.n_components:
        raise DimensionError(
            f"cannot keep {n_components} of {pca.n_components} components"
        )
    return PcaModel(
        band_means=pca.band_means,
        components=pca.components[:, :n_components],
        eigenvalues=pca.eigenvalues[:n_components],
        scales=pca.scales,
    )


# ---------------------------------------------------------------------------
# HSPCA1 container
# ---------------------------------------------------------------------------


def encode_pca(pca: PcaModel) -> bytes:
    """Serialize a PCA model to HSPCA1 bytes."""
    header: dict[str, Any] = {"bands": pca.bands, "components": pca.n_components}
    if pca.scales is not None:
        header["standardized"] = True
    raw = json.dumps(header, separators=(",", ":")).encode("utf-8")
    parts = [
        PCA_MAGIC,
        _U32.pack(len(raw)),
        raw,
        pca.band_means.astype("<f8").tobytes(),
        pca.eigenvalues.astype("<f8").tobytes(),
        np.ascontiguousarray(pca.components).astype("<f8").tobytes(),
    ]
    if pca.scales is not None:
        parts.append(pca.scales.astype("<f8").tobytes())
    return b"".join(parts)


def decode_pca(data: bytes) -> PcaModel:
    """Parse and validate HSPCA1 bytes."""
    magic_len = len(PCA_MAGIC)
    if data[:magic_len] != PCA_MAGIC:
        raise FormatError(f"bad magic {data[:magic_len]!r}, expected {PCA_MAGIC!r}")
    if len(data) < magic_len + 4:
        raise LengthError("truncated HSPCA1 header")
    (header_len,) = _U32.unpack_from(data, magic_len)
    start = magic_len + 4 + header_len
    try:
        header = json.loads(data[magic_len + 4 : start].decode("utf-8"))
        bands, components = int(header["bands"]), int(header["components"])
        standardized = bool(header.get("standardized", False))
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed HSPCA1 header: {exc}") from exc
    counts = [bands, components, bands * components] + ([bands] if standardized else [])
    if len(data) != start + 8 * sum(counts):
        raise LengthError(
            f"payload is {len(data)} bytes, header implies {start + 8 * sum(counts)}"
        )
    arrays = []
    offset = start
    for count in counts:
        arrays.append(np.frombuffer(data, dtype="<f8", count=count, offset=offset).copy())
        offset += 8 * count
    return PcaModel(
        band_means=arrays[0],
        eigenvalues=arrays[1],
        components=arrays[2].reshape(bands, components),
        scales=arrays[3] if standardized else None,
    )


def save_pca(pca: PcaModel, path: str | Path) -> None:
    """Write an HSPCA1 file."""
    try:
        Path(path).write_bytes(encode_pca(pca))
    except OSError as exc:
        raise IoError(f"cannot write PCA checkpoint {path}: {exc}") from exc


def load_pca(path: str | Path) -> PcaModel:
    """Read an HSPCA1 file."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read PCA checkpoint {path}: {exc}") from exc
    return decode_pca(data)


# ---------------------------------------------------------------------------
# Patch cubes
# ---------------------------------------------------------------------------


class PatchSet(BaseModel):
    """Samples with their center-pixel class ids (1..K) and pixel positions.

    ``x`` is ``[n][1][band][row][col]`` in the cubes layout and
    ``[n][row*col*band]`` in the flat layout.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    x: np.ndarray
    y: np.ndarray
    positions: np.ndarray
    window: int
    bands: int
    n_classes: int
    layout: PatchLayout = PatchLayout.cubes

    @model_validator(mode="after")
    def _consistent(self) -> PatchSet:
        count = self.y.shape[0]
        if self.x.shape[0] != count or self.positions.shape != (count, 2):
            raise ValueError("x, y and positions must have the same sample count")
        if self.layout is PatchLayout.cubes:
            expected: tuple[int, ...] = (count, 1, self.bands, self.window, self.window)
        else:
            expected = (count, self.window * self.window * self.bands)
        if self.x.shape != expected:
            raise ValueError(f"x has shape {self.x.shape}, expected {expected}")
        if count and (self.y.min() < 1 or self.y.max() > self.n_classes):
            raise ValueError(f"class ids must lie in 1..{self.n_classes}")
        return self

    def __len__(self) -> int:
        return int(self.y.shape[0])

    @property
    def targets(self) -> npt.NDArray[np.int64]:
        """Zero-based class indices used by the engine."""
        return self.y.astype(np.int64) - 1

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(int(d) for d in self.x.shape[1:])

    def subset(self, indices: npt.ArrayLike) -> PatchSet:
        index = np.asarray(indices, dtype=np.int64)
        return self.model_copy(
            update={"x": self.x[index], "y": self.y[index], "positions": self.positions[index]}
        )


def window_view(cube: npt.ArrayLike, window: int) -> npt.NDArray[np.floating]:
    """Zero-padded sliding windows: view of shape ``[row][col][band][w][w]``."""
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"window must be a positive odd number, got {window}")
    array = np.asarray(cube)
    if array.ndim != 3:
        raise DimensionError(f"expected a rank-3 cube, got shape {array.shape}")
    pad = (window - 1) // 2
    padded = np.pad(array, ((pad, pad), (pad, pad), (0, 0)))
    return sliding_window_view(padded, (window, window), axis=(0, 1))


def extract_patches(
    cube: npt.ArrayLike,
    labels: npt.ArrayLike,
    window: int,
    n_classes: int | None = None,
    dtype: npt.DTypeLike = np.float32,
) -> PatchSet:
    """One window x window x C patch per labeled pixel, in row-major scan order."""
    grid = np.asarray(labels)
    windows = window_view(cube, window)
    if grid.shape != windows.shape[:2]:
        raise DimensionError(
            f"labels shape {grid.shape} does not match cube {windows.shape[:2]}"
        )
    rows, cols = np.nonzero(grid)
    y = grid[rows, cols].astype(np.int64)
    classes = n_classes if n_classes is not None else int(grid.max(initial=0))
    x = np.ascontiguousarray(windows[rows, cols], dtype=dtype)[:, None]
    logger.debug("extracted %d patches of %dx%dx%d", len(y), window, window, x.shape[2])
    return PatchSet(
        x=x,
        y=y,
        positions=np.stack([rows, cols], axis=1).astype(np.int64),
        window=window,
        bands=int(windows.shape[2]),
        n_classes=max(classes, 1),
        layout=PatchLayout.cubes,
    )


def flatten_samples(cubes: npt.NDArray[Any]) -> npt.NDArray[Any]:
    """``[n][1][band][row][col]`` -> ``[n][row*col*band]`` in row, col, band order."""
    return np.ascontiguousarray(cubes[:, 0].transpose(0, 2, 3, 1)).reshape(cubes.shape[0], -1)


def flatten_patches(patches: PatchSet) -> PatchSet:
    """Flatten cubes for MLP input; flat input is returned unchanged."""
    if patches.layout is PatchLayout.flat:
        return patches
    return patches.model_copy(
        update={"x": flatten_samples(patches.x), "layout": PatchLayout.flat}
    )


# ---------------------------------------------------------------------------
# Train/test split
# ---------------------------------------------------------------------------


def split_indices(
    y: npt.ArrayLike, spec: SplitSpec
) -> tuple[npt.NDArray[np.int64], npt.NDArray[np.int64]]:
    """Shuffle sample indices with PCG32 and cut them into train and test."""
    labels = np.asarray(y)
    count = labels.shape[0]
    if count < 2:
        raise SplitError(f"need at least 2 samples to split, got {count}")
    order = Pcg32(spec.seed, stream=0).permutation(count)

    if not spec.stratified:
        n_train = math.floor(spec.train_fraction * count)
        if n_train < 1:
            raise SplitError(
                f"train fraction {spec.train_fraction} of {count} samples is empty"
            )
        return order[:n_train], order[n_train:]

    rank = np.empty(count, dtype=np.int64)
    rank[order] = np.arange(count)
    train_parts: list[npt.NDArray[np.int64]] = []
    test_parts: list[npt.NDArray[np.int64]] = []
    for label in np.unique(labels):
        members = order[labels[order] == label]
        n_train = math.floor(spec.train_fraction * members.shape[0])
        if n_train < 1:
            raise SplitError(
                f"class {int(label)} has {members.shape[0]} samples and would get "
                "no training sample"
            )
        train_parts.append(members[:n_train])
        test_parts.append(members[n_train:])
    train = np.concatenate(train_parts)
    test = np.concatenate(test_parts)
    return train[np.argsort(rank[train])], test[np.argsort(rank[test])]


def split_train_test(patches: PatchSet, spec: SplitSpec) -> tuple[PatchSet, PatchSet]:
    """Split a patch set into train and test parts by :func:`split_indices`."""
    train, test = split_indices(patches.y, spec)
    logger.info(
        "split %d samples into %d train / %d test (seed %d, stratified=%s)",
        len(patches),
        train.shape[0],
        test.shape[0],
        spec.seed,
        spec.stratified,
    )
    return patches.subset(train), patches.subset(test)


__all__ = [
    "PCA_MAGIC",
    "PatchSet",
    "PcaModel",
    "apply_pca",
    "decode_pca",
    "encode_pca",
    "extract_patches",
    "fit_pca",
    "fix_signs",
    "flatten_patches",
    "flatten_samples",
    "jacobi_eigh",
    "load_pca",
    "reconstruct",
    "reconstruction_error",
    "save_pca",
    "split_indices",
    "split_train_test",
    "truncate_pca",
    "window_view",
]

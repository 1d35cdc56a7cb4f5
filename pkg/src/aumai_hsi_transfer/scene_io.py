"""Hyperspectral scene container (HSC1), synthetic scenes, and class-map images."""

from __future__ import annotations

import json
import logging
import math
import struct
from pathlib import Path
from typing import Any, Final

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field, field_validator

from aumai_hsi_transfer.errors import (
    ConfigError,
    FormatError,
    IoError,
    LengthError,
    ValidationError,
)
from aumai_hsi_transfer.models import ClassEntry, ClassTable, SynthSpec
from aumai_hsi_transfer.rng import Pcg32

logger = logging.getLogger(__name__)

SCENE_MAGIC: Final = b"HSC1"
_U32 = struct.Struct("<I")

# ---------------------------------------------------------------------------
# Reference ground-truth tables
# ---------------------------------------------------------------------------

INDIAN_PINES: Final = ClassTable(
    classes=[
        ClassEntry(name="Alfalfa", sample_count=46),
        ClassEntry(name="Corn-notill", sample_count=1428),
        ClassEntry(name="Corn-mintill", sample_count=830),
        ClassEntry(name="Corn", sample_count=237),
        ClassEntry(name="Grass-pasture", sample_count=483),
        ClassEntry(name="Grass-trees", sample_count=730),
        ClassEntry(name="Grass-pasture-mowed", sample_count=28),
        ClassEntry(name="Hay-windrowed", sample_count=478),
        ClassEntry(name="Oats", sample_count=20),
        ClassEntry(name="Soybean-notill", sample_count=972),
        ClassEntry(name="Soybean-mintill", sample_count=2455),
        ClassEntry(name="Soybean-clean", sample_count=593),
        ClassEntry(name="Wheat", sample_count=205),
        ClassEntry(name="Woods", sample_count=1265),
        ClassEntry(name="Buildings-Grass-Trees-Drives", sample_count=386),
        ClassEntry(name="Stone-Steel-Towers", sample_count=93),
    ]
)

PAVIA_UNIVERSITY: Final = ClassTable(
    classes=[
        ClassEntry(name="Asphalt", sample_count=6631),
        ClassEntry(name="Meadows", sample_count=18649),
        ClassEntry(name="Gravel", sample_count=2099),
        ClassEntry(name="Trees", sample_count=3064),
        ClassEntry(name="Painted metal sheets", sample_count=1345),
        ClassEntry(name="Bare Soil", sample_count=5029),
        ClassEntry(name="Bitumen", sample_count=1330),
        ClassEntry(name="Self-Blocking Bricks", sample_count=3682),
        ClassEntry(name="Shadows", sample_count=947),
    ]
)

PRESETS: Final[dict[str, ClassTable]] = {
    "indian_pines": INDIAN_PINES,
    "pavia_university": PAVIA_UNIVERSITY,
}


# ---------------------------------------------------------------------------
# Scene
# ---------------------------------------------------------------------------


class Scene(BaseModel):
    """A hyperspectral cube with its ground-truth label mask.

    ``cube`` is ``[row][col][band]`` float32; ``labels`` is ``[row][col]``
    uint16 with 0 meaning unlabeled. Arrays are made read-only on
    construction.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    name: str
    cube: np.ndarray
    labels: np.ndarray
    class_names: list[str] = Field(min_length=1)

    @field_validator("cube", mode="before")
    @classmethod
    def _coerce_cube(cls, value: Any) -> np.ndarray:
        cube = np.array(value, dtype=np.float32)
        if cube.ndim != 3 or 0 in cube.shape:
            raise ValueError(f"cube must be a non-empty rank-3 array, got {cube.shape}")
        cube.setflags(write=False)
        return cube

    @field_validator("labels", mode="before")
    @classmethod
    def _coerce_labels(cls, value: Any) -> np.ndarray:
        raw = np.asarray(value)
        if raw.ndim != 2:
            raise ValueError(f"labels must be a rank-2 array, got {raw.shape}")
        if raw.size and (raw.min() < 0 or raw.max() > np.iinfo(np.uint16).max):
            raise ValueError("labels must fit in unsigned 16 bits")
        labels = raw.astype(np.uint16)
        labels.setflags(write=False)
        return labels

    def model_post_init(self, __context: Any) -> None:
        check_scene(self)

    @property
    def rows(self) -> int:
        return int(self.cube.shape[0])

    @property
    def cols(self) -> int:
        return int(self.cube.shape[1])

    @property
    def bands(self) -> int:
        return int(self.cube.shape[2])

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def labeled_count(self) -> int:
        return int(np.count_nonzero(self.labels))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.name == other.name
            and self.class_names == other.class_names
            and self.cube.shape == other.cube.shape
            and self.cube.tobytes() == other.cube.tobytes()
            and np.array_equal(self.labels, other.labels)
        )

    __hash__ = None  # type: ignore[assignment]


def check_scene(scene: Scene) -> None:
    """Raise :class:`ValidationError` unless every Scene invariant holds."""
    if scene.labels.shape != scene.cube.shape[:2]:
        raise ValidationError(
            f"labels shape {scene.labels.shape} does not match cube "
            f"spatial shape {scene.cube.shape[:2]}"
        )
    if not np.all(np.isfinite(scene.cube)):
        raise ValidationError(f"scene {scene.name!r} has non-finite cube values")
    highest = int(scene.labels.max()) if scene.labels.size else 0
    if highest > len(scene.class_names):
        raise ValidationError(
            f"label {highest} exceeds the {len(scene.class_names)} class names"
        )


# ---------------------------------------------------------------------------
# Class census
# ---------------------------------------------------------------------------


def class_table(scene: Scene) -> ClassTable:
    """Count labeled pixels per class."""
    counts = np.bincount(scene.labels.ravel(), minlength=scene.n_classes + 1)
    return ClassTable(
        classes=[
            ClassEntry(name=name, sample_count=int(counts[index + 1]))
            for index, name in enumerate(scene.class_names)
        ]
    )


def verify_class_table(scene: Scene, table: ClassTable) -> None:
    """Raise :class:`ValidationError` when the scene census differs from *table*."""
    census = class_table(scene)
    if len(census.classes) != len(table.classes):
        raise ValidationError(
            f"scene has {len(census.classes)} classes, table lists {len(table.classes)}"
        )
    for index, (got, want) in enumerate(zip(census.classes, table.classes), start=1):
        if got.sample_count != want.sample_count:
            raise ValidationError(
                f"class {index} ({want.name}): {got.sample_count} labeled pixels, "
                f"expected {want.sample_count}"
            )


# ---------------------------------------------------------------------------
# HSC1 container
# ---------------------------------------------------------------------------


def _header_bytes(scene: Scene) -> bytes:
    header = {
        "name": scene.name,
        "rows": scene.rows,
        "cols": scene.cols,
        "bands": scene.bands,
        "class_names": list(scene.class_names),
    }
    return json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def encode_scene(scene: Scene) -> bytes:
    """Serialise *scene* to HSC1 bytes."""
    check_scene(scene)
    header = _header_bytes(scene)
    return b"".join(
        [
            SCENE_MAGIC,
            _U32.pack(len(header)),
            header,
            scene.cube.astype("<f4").tobytes(order="C"),
            scene.labels.astype("<u2").tobytes(order="C"),
        ]
    )


def save_scene(scene: Scene, path: str | Path) -> None:
    """Write *scene* to *path* in the HSC1 format."""
    payload = encode_scene(scene)
    try:
        Path(path).write_bytes(payload)
    except OSError as exc:
        raise IoError(f"cannot write scene to {path}: {exc}") from exc
    logger.debug("wrote scene %r (%d bytes) to %s", scene.name, len(payload), path)


def decode_scene(data: bytes) -> Scene:
    """Parse HSC1 bytes into a :class:`Scene`."""
    if data[:4] != SCENE_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {SCENE_MAGIC!r}")
    if len(data) < 8:
        raise LengthError("truncated HSC1 header")
    (header_len,) = _U32.unpack_from(data, 4)
    body_start = 8 + header_len
    if len(data) < body_start:
        raise LengthError(f"header declares {header_len} bytes, file is too short")
    try:
        header = json.loads(data[8:body_start].decode("utf-8"))
        name = str(header["name"])
        rows, cols, bands = int(header["rows"]), int(header["cols"]), int(header["bands"])
        class_names = [str(item) for item in header["class_names"]]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed HSC1 header: {exc}") from exc
    if min(rows, cols, bands) <= 0:
        raise FormatError(f"non-positive dimensions {rows}x{cols}x{bands}")

    cube_bytes = rows * cols * bands * 4
    label_bytes = rows * cols * 2
    expected = body_start + cube_bytes + label_bytes
    if len(data) != expected:
        raise LengthError(f"payload is {len(data)} bytes, header implies {expected}")

    cube = np.frombuffer(data, dtype="<f4", count=rows * cols * bands, offset=body_start)
    labels = np.frombuffer(
        data, dtype="<u2", count=rows * cols, offset=body_start + cube_bytes
    )
    return Scene(
        name=name,
        cube=cube.reshape(rows, cols, bands),
        labels=labels.reshape(rows, cols),
        class_names=class_names,
    )


def load_scene(path: str | Path) -> Scene:
    """Read an HSC1 file."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read scene {path}: {exc}") from exc
    scene = decode_scene(data)
    logger.info(
        "loaded scene %r: %dx%dx%d, %d classes, %d labeled pixels",
        scene.name,
        scene.rows,
        scene.cols,
        scene.bands,
        scene.n_classes,
        scene.labeled_count,
    )
    return scene


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

_BACKGROUND_LEVEL = 0.1


def class_spectra(n_classes: int, bands: int) -> npt.NDArray[np.float64]:
    """Mean spectrum per class (row c-1 for class c): one Gaussian bump each."""
    positions = np.arange(bands, dtype=np.float64)
    centres = (np.arange(n_classes, dtype=np.float64) + 0.5) / n_classes * (bands - 1)
    width = max(bands / (2.0 * n_classes), 1.0)
    bumps = np.exp(-((positions[None, :] - centres[:, None]) ** 2) / (2.0 * width**2))
    return 0.2 + 0.8 * bumps


def _blob_grid(spec: SynthSpec) -> tuple[int, int]:
    grid_rows = math.ceil(math.sqrt(spec.blob_count))
    grid_cols = math.ceil(spec.blob_count / grid_rows)
    if spec.rows < grid_rows or spec.cols < grid_cols:
        raise ConfigError(
            f"{spec.rows}x{spec.cols} scene cannot hold {spec.blob_count} blobs"
        )
    return grid_rows, grid_cols


def _span(rng: Pcg32, start: int, stop: int) -> tuple[int, int]:
    """Random sub-interval covering at least half of ``[start, stop)``."""
    size = stop - start
    least = max(1, size // 2)
    length = least + rng.bounded(size - least + 1)
    offset = start + rng.bounded(size - length + 1)
    return offset, offset + length


def generate_synthetic_scene(spec: SynthSpec) -> Scene:
    """Build a deterministic scene of rectangular class blobs plus Gaussian noise.

    Blobs sit in disjoint grid cells and are assigned to classes round-robin,
    so every class owns at least one pixel.
    """
    if spec.n_classes > spec.blob_count:
        raise ConfigError(
            f"{spec.n_classes} classes need at least as many blobs, got {spec.blob_count}"
        )
    grid_rows, grid_cols = _blob_grid(spec)
    rng = Pcg32(spec.seed, stream=0)

    labels = np.zeros((spec.rows, spec.cols), dtype=np.uint16)
    for blob in range(spec.blob_count):
        cell_row, cell_col = divmod(blob, grid_cols)
        top, bottom = _span(
            rng,
            cell_row * spec.rows // grid_rows,
            (cell_row + 1) * spec.rows // grid_rows,
        )
        left, right = _span(
            rng,
            cell_col * spec.cols // grid_cols,
            (cell_col + 1) * spec.cols // grid_cols,
        )
        labels[top:bottom, left:right] = blob % spec.n_classes + 1

    spectra = np.vstack(
        [
            np.full((1, spec.bands), _BACKGROUND_LEVEL),
            class_spectra(spec.n_classes, spec.bands),
        ]
    )
    cube = spectra[labels]
    if spec.noise_sigma > 0:
        noise = rng.normal_array(spec.rows * spec.cols * spec.bands)
        cube = cube + spec.noise_sigma * noise.reshape(cube.shape)

    return Scene(
        name=spec.name,
        cube=cube.astype(np.float32),
        labels=labels,
        class_names=[f"class_{c}" for c in range(1, spec.n_classes + 1)],
    )


# ---------------------------------------------------------------------------
# Class maps
# ---------------------------------------------------------------------------

GOLDEN_ANGLE_DEG: Final = 137.508


def _hsv_to_rgb(hue: float) -> tuple[float, float, float]:
    """Hexcone conversion for full saturation and value."""
    sector = hue / 60.0
    index = int(math.floor(sector)) % 6
    frac = sector - math.floor(sector)
    rising, falling = frac, 1.0 - frac
    return [
        (1.0, rising, 0.0),
        (falling, 1.0, 0.0),
        (0.0, 1.0, rising),
        (0.0, falling, 1.0),
        (rising, 0.0, 1.0),
        (1.0, 0.0, falling),
    ][index]


def palette_color(class_index: int) -> tuple[int, int, int]:
    """RGB colour of a class id; 0 is black, class c has hue (c-1)*137.508 deg."""
    if class_index <= 0:
        return (0, 0, 0)
    hue = ((class_index - 1) * GOLDEN_ANGLE_DEG) % 360.0
    red, green, blue = _hsv_to_rgb(hue)
    return (
        int(math.floor(red * 255 + 0.5)),
        int(math.floor(green * 255 + 0.5)),
        int(math.floor(blue * 255 + 0.5)),
    )


def render_class_map(labels: npt.ArrayLike) -> bytes:
    """Binary PPM (P6) bytes for a class-id image."""
    grid = np.asarray(labels)
    if grid.ndim != 2:
        raise ValidationError(f"class map must be rank-2, got shape {grid.shape}")
    if grid.size and grid.min() < 0:
        raise ValidationError("class map contains negative class ids")
    grid = grid.astype(np.int64)
    top = int(grid.max()) if grid.size else 0
    lut = np.array([palette_color(index) for index in range(top + 1)], dtype=np.uint8)
    height, width = grid.shape
    return f"P6\n{width} {height}\n255\n".encode("ascii") + lut[grid].tobytes()


def write_class_map(labels: npt.ArrayLike, path: str | Path) -> None:
    """Write a class-id image as a binary PPM using :func:`palette_color`."""
    payload = render_class_map(labels)
    try:
        Path(path).write_bytes(payload)
    except OSError as exc:
        raise IoError(f"cannot write class map to {path}: {exc}") from exc
    logger.debug("wrote class map (%d bytes) to %s", len(payload), path)


__all__ = [
    "INDIAN_PINES",
    "PAVIA_UNIVERSITY",
    "PRESETS",
    "SCENE_MAGIC",
    "Scene",
    "check_scene",
    "class_spectra",
    "class_table",
    "decode_scene",
    "encode_scene",
    "generate_synthetic_scene",
    "load_scene",
    "palette_color",
    "render_class_map",
    "save_scene",
    "verify_class_table",
    "write_class_map",
]

"""Convert MATLAB-distributed scenes (cube + ground truth .mat pair) to HSC1.

Requires the optional ``mat`` extra (scipy).
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any

import numpy as np

from aumai_hsi_transfer.errors import FormatError, IoError
from aumai_hsi_transfer.models import ClassTable
from aumai_hsi_transfer.scene_io import Scene

logger = logging.getLogger(__name__)


def _loadmat(path: Path) -> dict[str, Any]:
    try:
        from scipy.io import loadmat
    except ImportError as exc:
        raise IoError(
            "reading .mat files needs scipy: pip install 'aumai-hsi-transfer[mat]'"
        ) from exc
    try:
        return dict(loadmat(str(path)))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise FormatError(f"{path} is not a readable MATLAB file: {exc}") from exc


def pick_array(contents: dict[str, Any], ndim: int, key: str | None = None) -> np.ndarray:
    """Return ``contents[key]``, or the largest array of rank *ndim*."""
    if key is not None:
        if key not in contents:
            raise FormatError(f"variable {key!r} not found; have {sorted(contents)}")
        array = np.asarray(contents[key])
        if array.ndim != ndim:
            raise FormatError(f"variable {key!r} has rank {array.ndim}, expected {ndim}")
        return array
    candidates = [
        np.asarray(value)
        for name, value in sorted(contents.items())
        if not name.startswith("__") and np.asarray(value).ndim == ndim
    ]
    if not candidates:
        raise FormatError(f"no rank-{ndim} array in MATLAB file")
    return max(candidates, key=lambda array: array.size)


def convert_mat_scene(
    cube_path: str | Path,
    labels_path: str | Path,
    name: str,
    table: ClassTable | None = None,
    cube_key: str | None = None,
    labels_key: str | None = None,
) -> Scene:
    """Build a :class:`Scene` from a cube file and a ground-truth file.

    Class names come from *table* when given, otherwise ``class_1..K`` with
    ``K`` the highest label present.
    """
    cube = pick_array(_loadmat(Path(cube_path)), 3, cube_key)
    labels = pick_array(_loadmat(Path(labels_path)), 2, labels_key)
    if table is not None:
        class_names = table.names
    else:
        top = int(labels.max())
        class_names = [f"class_{c}" for c in range(1, top + 1)]
    logger.info(
        "converted %s: cube %s, %d classes", name, cube.shape, len(class_names)
    )
    return Scene(name=name, cube=cube, labels=labels, class_names=class_names)


__all__ = ["convert_mat_scene", "pick_array"]

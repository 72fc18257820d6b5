"""Light-field data model, dataset I/O, and coordinate-plane construction.

A dataset is a directory holding one PNG per view plus ``manifest.json``
describing the grid. Views are RGB in [0, 1], stored channel-first. Angular
coordinates follow the convention that ``p`` indexes rows of the view grid
(vertical parallax) and ``q`` indexes columns (horizontal parallax); the
top-left view is (0, 0).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

MANIFEST_NAME = "manifest.json"
DEFAULT_FILE_PATTERN = "view_{row}_{col}.png"
RASTER_MAGIC = b"LFR1"


class LightFieldError(ValueError):
    """Base for data-model violations."""


class LoadError(LightFieldError):
    """Raised when a dataset cannot be decoded; names the offending view."""


@dataclass(frozen=True)
class ViewCoord:
    """Angular position of a view. Integer on the training grid; the
    pipeline accepts fractional values at inference."""

    p: float
    q: float


@dataclass(frozen=True)
class CoordinatePlanes:
    """Constant images broadcasting the target coordinates to every pixel."""

    P: np.ndarray
    Q: np.ndarray


def make_planes(coord: ViewCoord, height: int, width: int, dtype=np.float32) -> CoordinatePlanes:
    return CoordinatePlanes(
        np.full((height, width), coord.p, dtype),
        np.full((height, width), coord.q, dtype),
    )


class LightField:
    """(N+1) x (N+1) grid of co-registered RGB views.

    ``views`` has shape (rows, cols, 3, H, W) with values in [0, 1]. The
    grid is immutable after construction and safe to share across threads.
    """

    def __init__(self, views: np.ndarray):
        views = np.asarray(views)
        if views.ndim != 5 or views.shape[2] != 3:
            raise LightFieldError(f"views must be (rows, cols, 3, H, W), got {views.shape}")
        if views.shape[0] != views.shape[1]:
            raise LightFieldError(f"view grid must be square, got {views.shape[:2]}")
        if views.shape[0] < 2:
            raise LightFieldError("a light field needs at least a 2x2 grid")
        if not np.isfinite(views).all() or views.min() < 0 or views.max() > 1:
            raise LightFieldError("view values must be finite and inside [0, 1]")
        self.views = views.astype(np.float32, copy=False)
        self.views.setflags(write=False)

    @property
    def n(self) -> int:
        """Angular extent N; the grid is (N+1) x (N+1)."""
        return self.views.shape[0] - 1

    @property
    def height(self) -> int:
        return self.views.shape[3]

    @property
    def width(self) -> int:
        return self.views.shape[4]

    def view(self, p: int, q: int) -> np.ndarray:
        return self.views[p, q]


def corner_views(lf: LightField) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """The four grid corners in the fixed order (0,0), (0,N), (N,0), (N,N).

    This order is part of the model contract: every stacked tensor in the
    pipeline follows it.
    """
    n = lf.n
    return lf.view(0, 0), lf.view(0, n), lf.view(n, 0), lf.view(n, n)


def corner_coords(n: int) -> tuple[tuple[int, int], ...]:
    return ((0, 0), (0, n), (n, 0), (n, n))


def _read_png(path: Path) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise LoadError(f"cannot decode image {path.name}")
    if raw.ndim != 3 or raw.shape[2] < 3:
        raise LoadError(f"{path.name} is not an RGB image")
    rgb = raw[:, :, 2::-1]  # BGR(A) -> RGB
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise LoadError(f"{path.name} has unsupported sample type {raw.dtype}")
    return np.ascontiguousarray(rgb).astype(np.float32) / np.float32(scale)


def _write_png(path: Path, rgb_hwc: np.ndarray, bit_depth: int = 8) -> None:
    if bit_depth == 8:
        quant = np.round(np.clip(rgb_hwc, 0, 1) * 255).astype(np.uint8)
    elif bit_depth == 16:
        quant = np.round(np.clip(rgb_hwc, 0, 1) * 65535).astype(np.uint16)
    else:
        raise LightFieldError(f"bit_depth must be 8 or 16, got {bit_depth}")
    if not cv2.imwrite(str(path), quant[:, :, ::-1]):
        raise LightFieldError(f"failed to write {path}")


def load_lightfield(path: str | Path, gamma: float = 0.4) -> LightField:
    """Load a dataset directory, apply gamma correction, assemble the grid.

    Each view is decoded, scaled to [0, 1] and raised elementwise to
    ``gamma`` unless the manifest records that correction as already applied.
    Gamma correction is monotone, so pixel ordering survives it.
    """
    if gamma <= 0:
        raise LightFieldError(f"gamma must be positive, got {gamma}")
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise LoadError(f"missing {MANIFEST_NAME} in {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise LoadError(f"malformed {MANIFEST_NAME}: {exc}") from exc
    for key in ("rows", "cols", "height", "width", "file_pattern", "gamma_applied"):
        if key not in manifest:
            raise LoadError(f"{MANIFEST_NAME} lacks required field '{key}'")
    rows, cols = int(manifest["rows"]), int(manifest["cols"])
    height, width = int(manifest["height"]), int(manifest["width"])
    pattern = manifest["file_pattern"]

    views = np.empty((rows, cols, 3, height, width), np.float32)
    for r in range(rows):
        for c in range(cols):
            name = pattern.format(row=r, col=c)
            fp = root / name
            if not fp.is_file():
                raise LoadError(f"missing view {name}")
            img = _read_png(fp)
            if img.shape[:2] != (height, width):
                raise LoadError(
                    f"view {name} has dims {img.shape[1]}x{img.shape[0]}, "
                    f"manifest says {width}x{height}"
                )
            views[r, c] = img.transpose(2, 0, 1)
    if not manifest["gamma_applied"]:
        views = np.power(views, np.float32(gamma))
    return LightField(views)


def save_lightfield(lf: LightField, path: str | Path, bit_depth: int = 8) -> None:
    """Write the artifact's dataset format. Views are saved in the corrected
    domain they live in, so the manifest flags gamma as applied."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    rows = cols = lf.n + 1
    manifest = {
        "rows": rows,
        "cols": cols,
        "height": lf.height,
        "width": lf.width,
        "file_pattern": DEFAULT_FILE_PATTERN,
        "gamma_applied": True,
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")
    for r in range(rows):
        for c in range(cols):
            _write_png(
                root / DEFAULT_FILE_PATTERN.format(row=r, col=c),
                lf.view(r, c).transpose(1, 2, 0),
                bit_depth,
            )


def noncorner_coords(n: int) -> np.ndarray:
    """All integer grid positions except the four corners, shape (M, 2)."""
    corners = set(corner_coords(n))
    coords = [(p, q) for p in range(n + 1) for q in range(n + 1) if (p, q) not in corners]
    return np.asarray(coords, np.int64)


def draw_training_coords(rng: np.random.Generator, n: int, count: int = 1) -> np.ndarray:
    """Draw ``count`` angular positions uniformly from the non-corner grid."""
    pool = noncorner_coords(n)
    if len(pool) == 0:
        raise LightFieldError("grid has no in-between views to sample")
    return pool[rng.integers(0, len(pool), size=count)]


def sample_training_example(
    lf: LightField, rng: np.random.Generator, patch: int
) -> tuple[np.ndarray, np.ndarray, ViewCoord]:
    """One training example: four corner patches, the target patch and its
    coordinate. The five crops share a single spatial window drawn uniformly;
    the target position is uniform over the grid minus the corners."""
    if patch > min(lf.height, lf.width):
        raise LightFieldError(
            f"patch {patch} exceeds view dims {lf.height}x{lf.width}"
        )
    p, q = (int(v) for v in draw_training_coords(rng, lf.n, 1)[0])
    top = int(rng.integers(0, lf.height - patch + 1))
    left = int(rng.integers(0, lf.width - patch + 1))
    window = (slice(top, top + patch), slice(left, left + patch))
    corners = np.stack([v[:, window[0], window[1]] for v in corner_views(lf)])
    target = lf.view(p, q)[:, window[0], window[1]]
    return corners, target, ViewCoord(float(p), float(q))


# ---------------------------------------------------------------------------
# float raster format: 4-byte magic, uint32 ndim, uint32 extents, f32 data LE


def write_float_raster(path: str | Path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, np.float32)
    with open(path, "wb") as fh:
        fh.write(RASTER_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f4").tobytes())


def read_float_raster(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != RASTER_MAGIC:
            raise LoadError(f"{path} is not a float raster")
        (ndim,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != math.prod(shape):
        raise LoadError(f"{path} is truncated")
    return data.reshape(shape).astype(np.float32)

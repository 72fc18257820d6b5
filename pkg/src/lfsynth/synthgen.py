"""Procedural light fields with exact disparity and occlusion ground truth.

Scenes are stacks of fronto-parallel layers, each a textured plane at one
constant disparity (pixels per unit angular step). Layer content is defined
in the coordinates of the grid-center view; view (i, j) sees layer content
shifted by the disparity times the angular offset from the center. Layers
are listed back to front and composited in order, which doubles as a
z-buffer: the winning layer index per pixel is the occlusion oracle.

Textures are rendered on a canvas extended by the worst-case shift, so every
view of a full-plane layer is a pure translation of the same texture. With
integer disparities those translations are exact pixel shifts, giving
bit-level reconstruction targets.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .lightfield import LightField, save_lightfield, write_float_raster


class SceneError(ValueError):
    """Raised for scene specs the renderer cannot honor."""


@dataclass(frozen=True)
class LayerSpec:
    """One textured plane. ``rect`` bounds the opaque region in center-view
    coordinates as (row0, col0, row1, col1), half-open; None means the layer
    fills the frame."""

    seed: int
    disparity: float
    rect: tuple[int, int, int, int] | None = None
    smoothness: float = 2.0


@dataclass(frozen=True)
class SceneSpec:
    n: int
    height: int
    width: int
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        if self.n < 1 or self.n % 2 != 0:
            raise SceneError("angular extent must be a positive even integer")
        if not self.layers:
            raise SceneError("a scene needs at least one layer")
        if self.layers[0].rect is not None:
            raise SceneError("the first (background) layer must fill the frame")


def save_scene(spec: SceneSpec, path: str | Path, seed: int = 0) -> None:
    doc = {
        "n": spec.n,
        "height": spec.height,
        "width": spec.width,
        "seed": seed,
        "layers": [
            {
                "seed": l.seed,
                "disparity": l.disparity,
                "rect": list(l.rect) if l.rect else None,
                "smoothness": l.smoothness,
            }
            for l in spec.layers
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_scene(path: str | Path) -> tuple[SceneSpec, int]:
    doc = json.loads(Path(path).read_text())
    layers = tuple(
        LayerSpec(
            seed=int(l["seed"]),
            disparity=float(l["disparity"]),
            rect=tuple(l["rect"]) if l.get("rect") else None,
            smoothness=float(l.get("smoothness", 2.0)),
        )
        for l in doc["layers"]
    )
    spec = SceneSpec(int(doc["n"]), int(doc["height"]), int(doc["width"]), layers)
    return spec, int(doc.get("seed", 0))


@dataclass
class GroundTruth:
    """Exact per-view geometry. Keys are integer (p, q) grid positions.

    ``occlusion[(p, q)]`` holds four boolean maps in corner order; pixel
    (x, y) is flagged when the scene point it shows in view (p, q) is hidden
    (or out of frame) in that corner. ``all_visible`` is the complement of
    the union. ``disparity`` is the winning layer's disparity per pixel.
    """

    disparity: dict[tuple[int, int], np.ndarray]
    occlusion: dict[tuple[int, int], np.ndarray]
    all_visible: dict[tuple[int, int], np.ndarray]
    layer_disparities: tuple[float, ...]


def _texture(layer: LayerSpec, seed: int, index: int, h: int, w: int) -> np.ndarray:
    """Band-limited value noise, (3, h, w) in [0.05, 0.95]. Pure white noise
    would make bilinear matching ill-conditioned, so it is smoothed to the
    layer's correlation length and re-stretched per channel."""
    rng = np.random.Generator(
        np.random.Philox(key=[(seed << 20) + index, layer.seed])
    )
    noise = rng.standard_normal((3, h, w))
    tex = np.empty_like(noise)
    for c in range(3):
        sm = gaussian_filter(noise[c], layer.smoothness, mode="wrap")
        lo, hi = sm.min(), sm.max()
        tex[c] = 0.05 + 0.9 * (sm - lo) / max(hi - lo, 1e-9)
    return tex.astype(np.float32)


def _sample_plane(tex: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Standalone bilinear lookup on a (3, H, W) texture; clamped borders.

    Kept independent of the autodiff sampler on purpose: the renderer is the
    oracle the pipeline's warp is later checked against.
    """
    _, h, w = tex.shape
    xc = np.clip(xs, 0, h - 1)
    yc = np.clip(ys, 0, w - 1)
    x0 = np.floor(xc).astype(np.int64)
    y0 = np.floor(yc).astype(np.int64)
    x1 = np.minimum(x0 + 1, h - 1)
    y1 = np.minimum(y0 + 1, w - 1)
    wx = (xc - x0).astype(tex.dtype)[None]
    wy = (yc - y0).astype(tex.dtype)[None]
    return (
        tex[:, x0, y0] * (1 - wx) * (1 - wy)
        + tex[:, x0, y1] * (1 - wx) * wy
        + tex[:, x1, y0] * wx * (1 - wy)
        + tex[:, x1, y1] * wx * wy
    )


def render_lightfield(spec: SceneSpec, seed: int = 0) -> tuple[LightField, GroundTruth]:
    """Render every view plus exact ground truth; deterministic under seed.

    Views are quantized to 8-bit levels so the in-memory light field equals
    what the dataset format stores.
    """
    h, w, n = spec.height, spec.width, spec.n
    center = n / 2.0
    max_shift = max(abs(l.disparity) * center for l in spec.layers)
    margin = int(math.ceil(max_shift)) + 1
    if margin >= min(h, w):
        raise SceneError(
            f"disparity x angular offset ({max_shift:.1f} px) exceeds the frame"
        )

    textures = [
        _texture(layer, seed, idx, h + 2 * margin, w + 2 * margin)
        for idx, layer in enumerate(spec.layers)
    ]
    grid_x, grid_y = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")

    views = np.empty((n + 1, n + 1, 3, h, w), np.float32)
    winners: dict[tuple[int, int], np.ndarray] = {}
    for p in range(n + 1):
        for q in range(n + 1):
            img = None
            win = np.zeros((h, w), np.int32)
            for idx, layer in enumerate(spec.layers):
                # center-view coords of the scene point seen at (x, y): the
                # point at (x, y) here sits at (x + (c-p) d, y + (c-q) d) in
                # the center view, consistent with the warp convention
                cx = grid_x + (center - p) * layer.disparity
                cy = grid_y + (center - q) * layer.disparity
                lx = cx + margin
                ly = cy + margin
                if float(layer.disparity).is_integer():
                    color = textures[idx][:, lx.astype(np.int64), ly.astype(np.int64)]
                else:
                    color = _sample_plane(textures[idx], lx, ly)
                if layer.rect is None:
                    cover = np.ones((h, w), bool)
                else:
                    r0, c0, r1, c1 = layer.rect
                    cover = (cx >= r0) & (cx < r1) & (cy >= c0) & (cy < c1)
                if img is None:
                    img = color.copy()
                else:
                    img[:, cover] = color[:, cover]
                win[cover] = idx
            views[p, q] = np.round(np.clip(img, 0, 1) * 255).astype(np.float32) / 255
            winners[(p, q)] = win

    layer_d = np.asarray([l.disparity for l in spec.layers], np.float32)
    corners = ((0, 0), (0, n), (n, 0), (n, n))
    disparity: dict[tuple[int, int], np.ndarray] = {}
    occlusion: dict[tuple[int, int], np.ndarray] = {}
    all_visible: dict[tuple[int, int], np.ndarray] = {}
    for (p, q), win in winners.items():
        d_map = layer_d[win]
        occ = np.zeros((4, h, w), bool)
        for ci, (i, j) in enumerate(corners):
            mx = grid_x + (i - p) * d_map
            my = grid_y + (j - q) * d_map
            inside = (mx >= 0) & (mx <= h - 1) & (my >= 0) & (my <= w - 1)
            ix = np.clip(np.rint(mx).astype(np.int64), 0, h - 1)
            iy = np.clip(np.rint(my).astype(np.int64), 0, w - 1)
            same = winners[(i, j)][ix, iy] == win
            occ[ci] = ~(inside & same)
        disparity[(p, q)] = d_map
        occlusion[(p, q)] = occ
        all_visible[(p, q)] = ~occ.any(axis=0)

    gt = GroundTruth(disparity, occlusion, all_visible, tuple(float(d) for d in layer_d))
    return LightField(views), gt


def write_dataset(spec: SceneSpec, seed: int, out_dir: str | Path) -> tuple[LightField, GroundTruth]:
    """Render and persist: dataset dir + ground_truth/ rasters + scene.json."""
    root = Path(out_dir)
    lf, gt = render_lightfield(spec, seed)
    save_lightfield(lf, root)
    gt_dir = root / "ground_truth"
    gt_dir.mkdir(parents=True, exist_ok=True)
    for (p, q), d_map in gt.disparity.items():
        write_float_raster(gt_dir / f"disparity_{p}_{q}.raster", d_map)
        write_float_raster(
            gt_dir / f"occlusion_{p}_{q}.raster", gt.occlusion[(p, q)].astype(np.float32)
        )
    save_scene(spec, root / "scene.json", seed)
    return lf, gt


def occluded_band_mae(
    pred: np.ndarray, gt_view: np.ndarray, occlusion4: np.ndarray
) -> tuple[float | None, float | None]:
    """MAE x 100 split into the union-of-occlusions band and the all-visible
    region. Empty regions yield None."""
    if pred.shape != gt_view.shape:
        raise SceneError(f"shape mismatch {pred.shape} vs {gt_view.shape}")
    band = occlusion4.any(axis=0)
    visible = ~band
    err = np.abs(pred.astype(np.float64) - gt_view.astype(np.float64))
    occ = float(100 * err[:, band].mean()) if band.any() else None
    vis = float(100 * err[:, visible].mean()) if visible.any() else None
    return occ, vis


# ---------------------------------------------------------------------------
# presets used by the CLI, the experiment scripts and the test suite


def preset_scene(name: str, n: int = 2, size: int = 64) -> SceneSpec:
    if name == "constant":
        layers = (LayerSpec(seed=11, disparity=1.0),)
    elif name == "occluder":
        lo, hi = int(size * 0.3), int(size * 0.7)
        layers = (
            LayerSpec(seed=21, disparity=0.0),
            LayerSpec(seed=22, disparity=3.0, rect=(lo, lo, hi, hi), smoothness=1.5),
        )
    elif name == "occluder_soft":
        # occlusion-study variant: smaller parallax and smoother textures
        # keep the initial matching error inside the photometric basin, so
        # both ablation arms converge within a CPU budget
        lo, hi = int(size * 0.3), int(size * 0.7)
        layers = (
            LayerSpec(seed=21, disparity=0.0, smoothness=3.0),
            LayerSpec(seed=22, disparity=2.0, rect=(lo, lo, hi, hi), smoothness=2.5),
        )
    elif name == "asym":
        # off-center occluder; breaks every symmetry, used to pin the axis
        # convention (p rows, q columns); smooth textures keep the
        # double-resampling error of the fractional background small
        r0, c0 = int(size * 0.15), int(size * 0.45)
        layers = (
            LayerSpec(seed=31, disparity=0.5, smoothness=3.0),
            LayerSpec(seed=32, disparity=2.0, smoothness=2.5,
                      rect=(r0, c0, r0 + size // 4, c0 + size // 3)),
        )
    else:
        raise SceneError(f"unknown scene preset '{name}'")
    return SceneSpec(n=n, height=size, width=size, layers=layers)


PRESETS = ("constant", "occluder", "occluder_soft", "asym")

"""End-to-end view synthesis: features, disparities, warps, masks, blend.

Axis convention, fixed here once for everything downstream: angular ``p``
indexes grid rows and pairs with the first spatial axis (x, vertical
parallax); ``q`` indexes grid columns and pairs with the second spatial axis
(y, horizontal parallax). A corner view (i, j) warped to target (p, q) is
resampled at (x + (i - p) d, y + (j - q) d), with the disparity map d
expressed at target-view pixels.

View order everywhere is (0,0), (0,N), (N,0), (N,N); channel layouts of all
stacked tensors follow it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import networks, ops
from .lightfield import ViewCoord, corner_coords
from .networks import ModelWeights, NetKind
from .tensor import Tensor, ShapeError


class DomainError(ValueError):
    """Raised when a requested coordinate leaves the corner square."""


def _pixel_grids(height: int, width: int, dtype) -> tuple[Tensor, Tensor]:
    gx = np.broadcast_to(np.arange(height, dtype=dtype)[:, None], (height, width))
    gy = np.broadcast_to(np.arange(width, dtype=dtype)[None, :], (height, width))
    return (
        Tensor(gx.reshape(1, 1, height, width).copy()),
        Tensor(gy.reshape(1, 1, height, width).copy()),
    )


def _planes(coords: list[ViewCoord], height: int, width: int, dtype) -> tuple[Tensor, Tensor]:
    b = len(coords)
    p = np.asarray([c.p for c in coords], dtype).reshape(b, 1, 1, 1)
    q = np.asarray([c.q for c in coords], dtype).reshape(b, 1, 1, 1)
    P = np.broadcast_to(p, (b, 1, height, width)).copy()
    Q = np.broadcast_to(q, (b, 1, height, width)).copy()
    return Tensor(P), Tensor(Q)


def warp_view(
    view: Tensor,
    disparity: Tensor,
    source: tuple[int, int],
    target: tuple[np.ndarray, np.ndarray] | ViewCoord,
) -> Tensor:
    """Resample ``view`` so it registers with the target position.

    ``disparity`` is (B, 1, H, W); the target may be a single coordinate or
    per-batch arrays of p and q. Border pixels replicate outward, so no false
    zeros enter the image. Gradients reach both the image and the disparity.
    """
    b, _, height, width = view.shape
    if isinstance(target, ViewCoord):
        p_arr = np.full(b, target.p)
        q_arr = np.full(b, target.q)
    else:
        p_arr, q_arr = (np.asarray(t, np.float64).reshape(b) for t in target)
    dt = view.dtype
    off_p = Tensor((source[0] - p_arr).astype(dt).reshape(b, 1, 1, 1))
    off_q = Tensor((source[1] - q_arr).astype(dt).reshape(b, 1, 1, 1))
    gx, gy = _pixel_grids(height, width, dt)
    rows = ops.add(ops.mul(disparity, off_p), gx)
    cols = ops.add(ops.mul(disparity, off_q), gy)
    return ops.bilinear_sample(view, rows, cols)


def warp_image(
    view: np.ndarray,
    disparity: np.ndarray,
    source: tuple[int, int],
    target: ViewCoord,
) -> np.ndarray:
    """Convenience wrapper over ``warp_view`` for plain (3, H, W) arrays."""
    v = Tensor(view[None].astype(np.float32))
    d = Tensor(disparity[None, None].astype(np.float32))
    return warp_view(v, d, source, target).data[0]


def warp_corners(
    corners: list[Tensor],
    coords: list[ViewCoord],
    n: int,
    disparities: Tensor,
) -> list[Tensor]:
    """Warp each corner with its own disparity channel, in corner order."""
    p_arr = np.asarray([c.p for c in coords])
    q_arr = np.asarray([c.q for c in coords])
    return [
        warp_view(corners[idx], ops.channels(disparities, idx, idx + 1), src, (p_arr, q_arr))
        for idx, src in enumerate(corner_coords(n))
    ]


def blend(masks: Tensor, warps: list[Tensor]) -> Tensor:
    """Per-pixel convex combination of the four warps under the mask
    weights; the output therefore stays inside the warp envelope."""
    pred = None
    for idx, warp in enumerate(warps):
        term = ops.mul(ops.channels(masks, idx, idx + 1), warp)
        pred = term if pred is None else ops.add(pred, term)
    return pred


def compose_view(
    corners: list[Tensor],
    coords: list[ViewCoord],
    n: int,
    disparities: Tensor,
    masks: Tensor,
) -> tuple[Tensor, list[Tensor]]:
    """The geometry tail shared by every mask-based variant. Exposed so
    oracle tests can inject ground-truth disparities and hand-set masks into
    the production path."""
    warps = warp_corners(corners, coords, n, disparities)
    return blend(masks, warps), warps


@dataclass
class SynthesisTensors:
    """Batched, tape-connected outputs of one model run. Optional fields are
    absent for kinds that skip that stage (single_cnn has no geometry;
    horizontal/vertical exist only for the wide model)."""

    predicted: Tensor
    disparities: Tensor | None = None
    masks: Tensor | None = None
    warps: list[Tensor] | None = None
    horizontal: Tensor | None = None
    vertical: Tensor | None = None


@dataclass
class SynthesisResult:
    """Single-view numpy snapshot of a synthesis."""

    predicted: np.ndarray
    disparities: np.ndarray | None
    masks: np.ndarray | None
    warps: np.ndarray | None
    coord: ViewCoord


def _check_corners(corners: list[Tensor]) -> None:
    if len(corners) != 4:
        raise ShapeError(f"expected 4 corner views, got {len(corners)}")
    shape = corners[0].shape
    for c in corners[1:]:
        if c.shape != shape:
            raise ShapeError(f"corner shapes differ: {c.shape} vs {shape}")


def run_model(
    weights: ModelWeights,
    corners: list[Tensor],
    coords: list[ViewCoord],
    n: int,
    training: bool = False,
    update_stats: bool | None = None,
) -> SynthesisTensors:
    """Forward pass of any model kind on a batch of target coordinates."""
    _check_corners(corners)
    for c in coords:
        if not (0 <= c.p <= n and 0 <= c.q <= n):
            raise DomainError(f"target ({c.p}, {c.q}) outside the [0, {n}] grid")
    b, _, height, width = corners[0].shape
    dt = weights.dtype
    P, Q = _planes(coords, height, width, dt)
    kind = weights.kind

    if kind is NetKind.SINGLE_CNN:
        stacked = ops.concat(corners, axis=1)
        pred = networks.single_cnn_forward(weights, P, Q, stacked, training, update_stats)
        return SynthesisTensors(predicted=pred)

    horizontal = vertical = None
    if kind is NetKind.WIDE:
        feats = [
            networks.wide_features_forward(weights, P, Q, c, training, update_stats)
            for c in corners
        ]
        f00, f0n, fn0, fnn = feats
        h_top = networks.pairwise_disparity_forward(
            weights, P, Q, f00, f0n, "horizontal", None, training, update_stats)
        h_bot = networks.pairwise_disparity_forward(
            weights, P, Q, fn0, fnn, "horizontal", None, training, update_stats)
        v_left = networks.pairwise_disparity_forward(
            weights, P, Q, f00, fn0, "vertical", None, training, update_stats)
        v_right = networks.pairwise_disparity_forward(
            weights, P, Q, f0n, fnn, "vertical", None, training, update_stats)
        d_h = [
            ops.channels(h_top, 0, 1), ops.channels(h_top, 1, 2),
            ops.channels(h_bot, 0, 1), ops.channels(h_bot, 1, 2),
        ]
        d_v = [
            ops.channels(v_left, 0, 1), ops.channels(v_right, 0, 1),
            ops.channels(v_left, 1, 2), ops.channels(v_right, 1, 2),
        ]
        fused = [
            ops.clamp(
                networks.fuse_disparity(weights, d_h[i], d_v[i], training, update_stats),
                -weights.d_max, weights.d_max,
            )
            for i in range(4)
        ]
        disparities = ops.concat(fused, axis=1)
        horizontal = ops.concat(d_h, axis=1)
        vertical = ops.concat(d_v, axis=1)
    else:
        if kind is NetKind.NO_FEATURES:
            feat_in = ops.concat(corners, axis=1)
        else:
            feats = [
                networks.features_forward(weights, P, Q, c, training, update_stats)
                for c in corners
            ]
            feat_in = ops.concat(feats, axis=1)
        disparities = networks.disparity_forward(
            weights, P, Q, feat_in, None, training, update_stats)
        if kind is NetKind.SINGLE_DISPARITY:
            one = disparities
            disparities = ops.concat([one, one, one, one], axis=1)

    warps = warp_corners(corners, coords, n, disparities)
    if kind is NetKind.NO_SELECTION:
        masks = Tensor(np.full((b, 4, height, width), 0.25, dt))
    else:
        warp_vol = ops.concat(warps, axis=1)
        masks = networks.selection_forward(
            weights, P, Q, warp_vol, disparities, training, update_stats)
    pred = blend(masks, warps)

    return SynthesisTensors(
        predicted=pred,
        disparities=disparities,
        masks=masks,
        warps=warps,
        horizontal=horizontal,
        vertical=vertical,
    )


def synthesize(
    weights: ModelWeights,
    corners,
    coord: ViewCoord,
    n: int,
    bn_mode: str = "batch",
) -> SynthesisResult:
    """Synthesize one view; numpy in, numpy out. ``corners`` is the four
    (3, H, W) images in the fixed order.

    ``bn_mode`` picks the test-time normalization statistics: "batch"
    (default) normalizes with statistics of the view being synthesized,
    "running" consumes the training-time running averages. Activation
    statistics shift with the coordinate planes, so the per-view batch mode
    is markedly more accurate; running stats are kept in checkpoints and
    exposed for sensitivity studies. Neither mode updates the stored stats.
    """
    if bn_mode not in ("batch", "running"):
        raise ValueError(f"bn_mode must be 'batch' or 'running', got {bn_mode!r}")
    tensors = [
        c if isinstance(c, Tensor) else Tensor(np.asarray(c, weights.dtype)[None])
        for c in corners
    ]
    out = run_model(
        weights, tensors, [coord], n, training=(bn_mode == "batch"), update_stats=False
    )
    return SynthesisResult(
        predicted=out.predicted.data[0].copy(),
        disparities=out.disparities.data[0].copy() if out.disparities is not None else None,
        masks=out.masks.data[0].copy() if out.masks is not None else None,
        warps=np.stack([w.data[0] for w in out.warps]) if out.warps is not None else None,
        coord=coord,
    )


def synthesize_wide(
    weights: ModelWeights, corners, coord: ViewCoord, n: int, bn_mode: str = "batch"
) -> SynthesisResult:
    """Wide-baseline entry point; identical contract, checked kind."""
    if weights.kind is not NetKind.WIDE:
        raise ValueError(f"synthesize_wide needs a wide-baseline model, got {weights.kind.value}")
    return synthesize(weights, corners, coord, n, bn_mode)

"""Network construction, forward passes, audits, and checkpoints.

The plenoptic model is three sequential CNNs. The feature extractor turns
each corner view plus the coordinate planes (5 channels) into a 32-channel
volume through five 3x3 conv layers with one residual add, two upsampled
average poolings (16 and 8), a 128-channel concatenation and a final 3x3
fusion. The disparity net maps the concatenated features plus planes (130
channels) through four dilated layers (rates 2, 4, 8, 16) and three plain
ones to four tanh-bounded maps scaled by d_max. The selection net maps the
twelve warped channels, four disparities and two planes (18 channels) to
four logits normalized by a softmax with a single trainable temperature.

Every conv is followed by ELU then batch normalization, except the final
tanh layers which carry neither. Zero padding keeps spatial dims fixed.

Ablation variants and the wide-baseline adaptation (per-branch dilated
feature nets, pairwise horizontal/vertical disparity nets, small fusion
net, d_max 60) are built from the same layer tables.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import ops
from .ops import BatchNormState, PoolError
from .tensor import Tensor, ShapeError


class NetKind(Enum):
    PLENOPTIC = "plenoptic"
    WIDE = "wide_baseline"
    SINGLE_CNN = "single_cnn"
    SINGLE_DISPARITY = "single_disparity"
    NO_SELECTION = "no_selection"
    NO_FEATURES = "no_features"

    @classmethod
    def parse(cls, name: str) -> "NetKind":
        for kind in cls:
            if kind.value == name:
                return kind
        raise ValueError(f"unknown net kind '{name}' (choose from "
                         f"{[k.value for k in cls]})")


DEFAULT_DMAX = {kind: 4.0 for kind in NetKind}
DEFAULT_DMAX[NetKind.WIDE] = 60.0

# Published parameter budgets the construction is audited against.
PARAM_BUDGETS = {
    NetKind.PLENOPTIC: 1_270_000,
    NetKind.SINGLE_CNN: 1_660_000,
    NetKind.WIDE: 2_020_000,
}

SINGLE_CNN_DEPTH = 22
WIDE_BRANCH_DILATIONS = (2, 4, 8)
FUSE_HIDDEN = 16


@dataclass(frozen=True)
class LayerDef:
    name: str
    cin: int
    cout: int
    k: int = 3
    dilation: int = 1
    act: str = "elu"  # elu | tanh | linear
    bn: bool = True

    def param_count(self) -> int:
        n = self.cout * self.cin * self.k * self.k + self.cout
        if self.bn:
            n += 2 * self.cout
        return n


FEATURE_LAYERS = (
    LayerDef("conv0", 5, 32),
    LayerDef("conv1", 32, 32),
    LayerDef("conv2", 32, 32),
    LayerDef("conv3", 32, 32),
    LayerDef("conv4", 32, 32),
    LayerDef("conv5", 128, 32),
)

SELECTION_LAYERS = (
    LayerDef("conv0", 18, 64),
    LayerDef("conv1", 64, 128),
    LayerDef("conv2", 128, 128),
    LayerDef("conv3", 128, 128),
    LayerDef("conv4", 128, 64),
    LayerDef("conv5", 64, 32),
    LayerDef("conv6", 32, 4, act="tanh", bn=False),
)

FUSE_LAYERS = (
    LayerDef("conv0", 2, FUSE_HIDDEN, k=3, bn=False),
    LayerDef("conv1", FUSE_HIDDEN, 1, k=1, act="linear", bn=False),
)

WIDE_FUSION_LAYER = LayerDef("fuse", 96, 32, k=1)


def disparity_layers(cin: int = 130, cout: int = 4, extended: bool = False) -> tuple[LayerDef, ...]:
    """The disparity trunk. ``extended`` inserts two extra layers to make up
    the parameters lost when the feature net is ablated away."""
    layers = [
        LayerDef("conv0", cin, 128, dilation=2),
        LayerDef("conv1", 128, 128, dilation=4),
        LayerDef("conv2", 128, 128, dilation=8),
        LayerDef("conv3", 128, 128, dilation=16),
    ]
    if extended:
        layers.append(LayerDef("conv3b", 128, 128))
    layers.append(LayerDef("conv4", 128, 64))
    if extended:
        layers.append(LayerDef("conv4b", 64, 64))
    layers.append(LayerDef("conv5", 64, 64))
    layers.append(LayerDef("conv6", 64, cout, act="tanh", bn=False))
    return tuple(layers)


def single_cnn_width(budget: int = PARAM_BUDGETS[NetKind.SINGLE_CNN]) -> int:
    """Hidden width solved numerically against the published budget.

    With 22 same-padded 3x3 layers (dilations 2/4/8/16 at layers 4-7, which
    do not change the count), ELU+BN on all but the linear head, the total is
    180 w^2 + 216 w + 3.
    """
    return min(range(16, 512), key=lambda w: abs(180 * w * w + 216 * w + 3 - budget))


def single_cnn_layers(width: int | None = None) -> tuple[LayerDef, ...]:
    w = width if width is not None else single_cnn_width()
    dil = {3: 2, 4: 4, 5: 8, 6: 16}  # fourth through seventh layers
    layers = [LayerDef("conv00", 14, w, dilation=dil.get(0, 1))]
    for i in range(1, SINGLE_CNN_DEPTH - 1):
        layers.append(LayerDef(f"conv{i:02d}", w, w, dilation=dil.get(i, 1)))
    layers.append(LayerDef(f"conv{SINGLE_CNN_DEPTH - 1:02d}", w, 3, act="linear", bn=False))
    return tuple(layers)


def sections(kind: NetKind) -> dict[str, tuple[LayerDef, ...]]:
    """Named layer groups per model kind; ordering fixes initialization."""
    if kind is NetKind.PLENOPTIC:
        return {
            "features": FEATURE_LAYERS,
            "disparity": disparity_layers(),
            "selection": SELECTION_LAYERS,
        }
    if kind is NetKind.SINGLE_DISPARITY:
        return {
            "features": FEATURE_LAYERS,
            "disparity": disparity_layers(cout=1),
            "selection": SELECTION_LAYERS,
        }
    if kind is NetKind.NO_SELECTION:
        return {
            "features": FEATURE_LAYERS,
            "disparity": disparity_layers(),
        }
    if kind is NetKind.NO_FEATURES:
        return {
            "disparity": disparity_layers(cin=14, extended=True),
            "selection": SELECTION_LAYERS,
        }
    if kind is NetKind.SINGLE_CNN:
        return {"single": single_cnn_layers()}
    if kind is NetKind.WIDE:
        groups: dict[str, tuple[LayerDef, ...]] = {}
        for r in WIDE_BRANCH_DILATIONS:
            groups[f"features.d{r}"] = FEATURE_LAYERS
        groups["features_fuse"] = (WIDE_FUSION_LAYER,)
        groups["disp_h"] = disparity_layers(cin=66, cout=2)
        groups["disp_v"] = disparity_layers(cin=66, cout=2)
        groups["fuse"] = FUSE_LAYERS
        groups["selection"] = SELECTION_LAYERS
        return groups
    raise ValueError(kind)


def has_selection(kind: NetKind) -> bool:
    return kind not in (NetKind.NO_SELECTION, NetKind.SINGLE_CNN)


def expected_param_count(kind: NetKind) -> int:
    total = sum(l.param_count() for group in sections(kind).values() for l in group)
    if has_selection(kind):
        total += 1  # softmax temperature
    return total


def layer_table(kind: NetKind) -> list[tuple[str, str, int, int, int, int, str, bool]]:
    """(section, name, k, dilation, in, out, activation, bn) rows."""
    rows = []
    for section, group in sections(kind).items():
        for l in group:
            rows.append((section, l.name, l.k, l.dilation, l.cin, l.cout, l.act, l.bn))
    return rows


def receptive_field(kind: NetKind) -> int:
    """Analytic receptive field of the deepest conv path.

    Convention: 1 + sum of (k - 1) * dilation over the path, with each
    upsampled average pooling contributing k - 1. Warp displacement (bounded
    by d_max but input dependent) is excluded.
    """

    def conv_sum(group: tuple[LayerDef, ...]) -> int:
        return sum((l.k - 1) * l.dilation for l in group)

    def features(dilation: int) -> int:
        # trunk conv0..conv4 at the branch dilation, pool16 path, conv5
        return 5 * 2 * dilation + 15 + 2

    if kind is NetKind.SINGLE_CNN:
        return 1 + conv_sum(single_cnn_layers())
    if kind is NetKind.WIDE:
        rf = features(max(WIDE_BRANCH_DILATIONS))  # 1x1 fusion adds nothing
        rf += conv_sum(disparity_layers(cin=66, cout=2))
        rf += conv_sum(FUSE_LAYERS)
        rf += conv_sum(SELECTION_LAYERS)
        return 1 + rf
    rf = features(1)
    grp = sections(kind)
    rf_disp = conv_sum(grp["disparity"])
    rf_sel = conv_sum(grp["selection"]) if "selection" in grp else 0
    if kind is NetKind.NO_FEATURES:
        return 1 + rf_disp + rf_sel
    return 1 + rf + rf_disp + rf_sel


@dataclass
class ModelWeights:
    """All trainable parameters plus batch-norm running statistics.

    Parameter paths look like ``features.conv0.kernel``; the softmax
    temperature lives under the bare name ``beta``. A single parameter set
    backs the feature net for all four corner invocations, so per-view
    divergence is impossible by construction.
    """

    kind: NetKind
    d_max: float
    params: dict[str, Tensor]
    bn: dict[str, BatchNormState]
    dtype: np.dtype
    seed_lineage: list[int] = field(default_factory=list)

    @property
    def beta(self) -> Tensor:
        return self.params["beta"]

    def trainable_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def param_groups(self) -> dict[str, list[str]]:
        groups: dict[str, list[str]] = {}
        for name in self.params:
            groups.setdefault(name.split(".", 1)[0], []).append(name)
        return groups


def xavier_kernel(rng: np.random.Generator, l: LayerDef, dtype) -> np.ndarray:
    fan_in = l.cin * l.k * l.k
    fan_out = l.cout * l.k * l.k
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, (l.cout, l.cin, l.k, l.k)).astype(dtype)


def build(
    kind: NetKind | str,
    d_max: float | None = None,
    seed: int = 0,
    dtype=np.float32,
) -> ModelWeights:
    """Construct a model with Xavier-initialized kernels, zero biases, unit
    batch-norm gains and temperature 1. Identical seeds give bit-identical
    weights. The layer map and total parameter count are audited here."""
    if isinstance(kind, str):
        kind = NetKind.parse(kind)
    if d_max is None:
        d_max = DEFAULT_DMAX[kind]
    dtype = np.dtype(dtype)
    rng = np.random.Generator(np.random.Philox(key=[seed, 0x1F5]))

    params: dict[str, Tensor] = {}
    bn: dict[str, BatchNormState] = {}
    for section, group in sections(kind).items():
        for l in group:
            path = f"{section}.{l.name}"
            params[path + ".kernel"] = Tensor(xavier_kernel(rng, l, dtype), requires_grad=True)
            params[path + ".bias"] = Tensor(np.zeros(l.cout, dtype), requires_grad=True)
            if l.bn:
                params[path + ".bn.gamma"] = Tensor(np.ones(l.cout, dtype), requires_grad=True)
                params[path + ".bn.beta"] = Tensor(np.zeros(l.cout, dtype), requires_grad=True)
                bn[path] = BatchNormState.fresh(l.cout, dtype)
    if has_selection(kind):
        params["beta"] = Tensor(np.asarray(1.0, dtype), requires_grad=True)

    weights = ModelWeights(kind, float(d_max), params, bn, dtype, [seed])
    actual = weights.trainable_count()
    expected = expected_param_count(kind)
    if actual != expected:  # pragma: no cover - construction self check
        raise AssertionError(f"parameter audit failed: built {actual}, table says {expected}")
    return weights


# ---------------------------------------------------------------------------
# forward passes


def _block(
    w: ModelWeights,
    section: str,
    l: LayerDef,
    x: Tensor,
    training: bool,
    update_stats: bool | None,
    dilation: int | None = None,
) -> Tensor:
    path = f"{section}.{l.name}"
    y = ops.conv2d(
        x,
        w.params[path + ".kernel"],
        w.params[path + ".bias"],
        dilation if dilation is not None else l.dilation,
    )
    if l.act == "elu":
        y = ops.elu(y)
    elif l.act == "tanh":
        y = ops.tanh(y)
    if l.bn:
        y = ops.batch_norm(
            y,
            w.params[path + ".bn.gamma"],
            w.params[path + ".bn.beta"],
            w.bn[path],
            training,
            update_stats,
        )
    return y


def features_forward(
    w: ModelWeights,
    P: Tensor,
    Q: Tensor,
    view: Tensor,
    training: bool = False,
    update_stats: bool | None = None,
    section: str = "features",
    trunk_dilation: int = 1,
) -> Tensor:
    """32-channel feature volume for one view. Weights are shared across all
    views by construction. ``trunk_dilation`` dilates the first five conv
    layers only (used by the wide-baseline branches)."""
    if view.shape[1] != 3:
        raise ShapeError(f"expected an RGB view, got {view.shape[1]} channels")
    H, W = view.shape[2], view.shape[3]
    if H < 16 or W < 16:
        raise PoolError(f"feature pooling needs at least 16x16 input, got {H}x{W}")
    x = ops.concat([view, P, Q], axis=1)
    layers = {l.name: l for l in FEATURE_LAYERS}
    c0 = _block(w, section, layers["conv0"], x, training, update_stats, trunk_dilation)
    c1 = _block(w, section, layers["conv1"], c0, training, update_stats, trunk_dilation)
    c2 = _block(w, section, layers["conv2"], c1, training, update_stats, trunk_dilation)
    c3 = _block(w, section, layers["conv3"], c2, training, update_stats, trunk_dilation)
    c4 = _block(w, section, layers["conv4"], c3, training, update_stats, trunk_dilation)
    c4 = ops.add(c2, c4)  # residual join
    p0 = ops.avg_pool(c4, 16)
    p1 = ops.avg_pool(c4, 8)
    cat = ops.concat([c2, c4, p0, p1], axis=1)
    return _block(w, section, layers["conv5"], cat, training, update_stats)


def wide_features_forward(
    w: ModelWeights,
    P: Tensor,
    Q: Tensor,
    view: Tensor,
    training: bool = False,
    update_stats: bool | None = None,
) -> Tensor:
    """Wide-baseline features: the feature net evaluated per dilation branch
    (rates 2, 4, 8 on the trunk, each branch with its own weights), branch
    outputs concatenated and fused by a 1x1 convolution down to 32 channels."""
    branches = [
        features_forward(
            w, P, Q, view, training, update_stats,
            section=f"features.d{r}", trunk_dilation=r,
        )
        for r in WIDE_BRANCH_DILATIONS
    ]
    cat = ops.concat(branches, axis=1)
    return _block(w, "features_fuse", WIDE_FUSION_LAYER, cat, training, update_stats)


def _run_group(
    w: ModelWeights,
    section: str,
    group: tuple[LayerDef, ...],
    x: Tensor,
    training: bool,
    update_stats: bool | None,
) -> Tensor:
    for l in group:
        x = _block(w, section, l, x, training, update_stats)
    return x


def disparity_forward(
    w: ModelWeights,
    P: Tensor,
    Q: Tensor,
    features: Tensor,
    d_max: float | None = None,
    training: bool = False,
    update_stats: bool | None = None,
) -> Tensor:
    """Per-view disparity maps, channel order (d00, d0N, dN0, dNN). The tanh
    head times d_max bounds every value to [-d_max, d_max] exactly."""
    d_max = w.d_max if d_max is None else d_max
    x = ops.concat([features, P, Q], axis=1)
    group = sections(w.kind)["disparity"]
    if x.shape[1] != group[0].cin:
        raise ShapeError(
            f"disparity input must have {group[0].cin} channels, got {x.shape[1]}"
        )
    y = _run_group(w, "disparity", group, x, training, update_stats)
    return ops.mul(y, float(d_max))


def selection_forward(
    w: ModelWeights,
    P: Tensor,
    Q: Tensor,
    warps: Tensor,
    disparities: Tensor,
    training: bool = False,
    update_stats: bool | None = None,
) -> Tensor:
    """Soft view-selection masks; non-negative and summing to one over the
    four view channels at every pixel."""
    x = ops.concat([warps, disparities, P, Q], axis=1)
    if x.shape[1] != SELECTION_LAYERS[0].cin:
        raise ShapeError(
            f"selection input must have {SELECTION_LAYERS[0].cin} channels, got {x.shape[1]}"
        )
    y = _run_group(w, "selection", SELECTION_LAYERS, x, training, update_stats)
    return ops.softmax_beta(y, w.beta)


def single_cnn_forward(
    w: ModelWeights,
    P: Tensor,
    Q: Tensor,
    corners: Tensor,
    training: bool = False,
    update_stats: bool | None = None,
) -> Tensor:
    """Direct 22-layer regression from the stacked corners to the view."""
    x = ops.concat([corners, P, Q], axis=1)
    return _run_group(w, "single", sections(NetKind.SINGLE_CNN)["single"], x, training, update_stats)


def pairwise_disparity_forward(
    w: ModelWeights,
    P: Tensor,
    Q: Tensor,
    feat_a: Tensor,
    feat_b: Tensor,
    axis: str,
    d_max: float | None = None,
    training: bool = False,
    update_stats: bool | None = None,
) -> Tensor:
    """Two disparity maps from one feature pair, tanh-bounded by d_max.
    ``axis`` selects the horizontal or vertical pair network."""
    if axis not in ("horizontal", "vertical"):
        raise ValueError(f"axis must be horizontal or vertical, got {axis}")
    section = "disp_h" if axis == "horizontal" else "disp_v"
    d_max = w.d_max if d_max is None else d_max
    x = ops.concat([feat_a, feat_b, P, Q], axis=1)
    group = sections(NetKind.WIDE)[section]
    y = _run_group(w, section, group, x, training, update_stats)
    return ops.mul(y, float(d_max))


def fuse_disparity(
    w: ModelWeights,
    d_h: Tensor,
    d_v: Tensor,
    training: bool = False,
    update_stats: bool | None = None,
) -> Tensor:
    """Merge one view's horizontal and vertical estimates: 3x3 hidden layer
    (ELU, 16 channels) into a linear 1x1 output."""
    if d_h.shape != d_v.shape:
        raise ShapeError(f"fuse_disparity inputs differ: {d_h.shape} vs {d_v.shape}")
    x = ops.concat([d_h, d_v], axis=1)
    return _run_group(w, "fuse", FUSE_LAYERS, x, training, update_stats)


# ---------------------------------------------------------------------------
# checkpoint container: 8-byte length, JSON index, raw little-endian blocks


_CKPT_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


def save_checkpoint(
    path: str | Path,
    weights: ModelWeights,
    adam: "dict | None" = None,
    extra: dict | None = None,
) -> None:
    entries: dict[str, np.ndarray] = {}
    for name, t in weights.params.items():
        entries["param." + name] = t.data
    for name, state in weights.bn.items():
        entries["bnstat." + name + ".mean"] = state.mean
        entries["bnstat." + name + ".var"] = state.var
    meta: dict = {
        "format": "lfsynth-checkpoint-v1",
        "kind": weights.kind.value,
        "d_max": weights.d_max,
        "seed_lineage": list(weights.seed_lineage),
    }
    if adam is not None:
        meta["adam_step"] = int(adam["step"])
        for name, arr in adam["m"].items():
            entries["adam.m." + name] = arr
        for name, arr in adam["v"].items():
            entries["adam.v." + name] = arr
    if extra:
        meta["extra"] = extra

    index = {}
    offset = 0
    blobs = []
    for name in sorted(entries):
        arr = entries[name]
        code = "f8" if arr.dtype == np.float64 else "f4"
        raw = np.ascontiguousarray(arr, _CKPT_DTYPES[code]).tobytes()
        index[name] = {"dtype": code, "shape": list(arr.shape), "offset": offset}
        blobs.append(raw)
        offset += len(raw)
    meta["tensors"] = index
    header = json.dumps(meta).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> tuple[ModelWeights, "dict | None"]:
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack("<Q", fh.read(8))
        meta = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()
    if meta.get("format") != "lfsynth-checkpoint-v1":
        raise ValueError(f"{path} is not a model checkpoint")

    def fetch(name: str) -> np.ndarray:
        info = meta["tensors"][name]
        dt = _CKPT_DTYPES[info["dtype"]]
        count = int(np.prod(info["shape"])) if info["shape"] else 1
        start = info["offset"]
        arr = np.frombuffer(payload, dt, count, start).reshape(info["shape"])
        return arr.astype(dt.newbyteorder("="))

    kind = NetKind.parse(meta["kind"])
    params: dict[str, Tensor] = {}
    bn: dict[str, BatchNormState] = {}
    dtype = np.float32
    for name in meta["tensors"]:
        if name.startswith("param."):
            arr = fetch(name)
            params[name[len("param."):]] = Tensor(arr, requires_grad=True)
            dtype = arr.dtype
        elif name.endswith(".mean") and name.startswith("bnstat."):
            layer = name[len("bnstat."):-len(".mean")]
            bn[layer] = BatchNormState(fetch(name), fetch(f"bnstat.{layer}.var"))
    weights = ModelWeights(
        kind, float(meta["d_max"]), params, bn, np.dtype(dtype),
        list(meta.get("seed_lineage", [])),
    )
    adam = None
    if "adam_step" in meta:
        adam = {
            "step": int(meta["adam_step"]),
            "m": {
                name[len("adam.m."):]: fetch(name)
                for name in meta["tensors"]
                if name.startswith("adam.m.")
            },
            "v": {
                name[len("adam.v."):]: fetch(name)
                for name in meta["tensors"]
                if name.startswith("adam.v.")
            },
        }
    return weights, adam

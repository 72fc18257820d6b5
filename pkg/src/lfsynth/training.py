"""Loss functions, Adam optimizer, and the training loop.

The loss is an L1 reconstruction term plus a weighted L1 term on forward
spatial differences (lambda_g = 0.5); both are means rather than sums so the
weighting is independent of patch size. An optional warp-consistency term
averages the L1 distance of the four warped views to the target. The wide
model adds two analogous terms built from the directional (pre-fusion)
disparities, each weighted 0.25.

Training samples integer target positions uniformly from the non-corner
grid, one independently drawn light field, position and crop window per
batch element, and is bit-reproducible from its seed.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .lightfield import LightField, ViewCoord, sample_training_example
from .networks import ModelWeights, NetKind, build, save_checkpoint
from .pipeline import SynthesisTensors, run_model, warp_view
from .lightfield import corner_coords
from .tensor import Tape, Tensor, backward

LOSS_ED = "E_d"
LOSS_EG = "E_g"
LOSS_EW = "E_w"
WIDE_DIRECTIONAL_WEIGHT = 0.25


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch: int = 3
    patch: int = 192
    iterations: int = 300_000
    lambda_g: float = 0.5
    lambda_w: float = 1.0
    loss_terms: tuple[str, ...] = (LOSS_ED, LOSS_EG)
    net_kind: str = NetKind.PLENOPTIC.value
    d_max: float = 4.0
    seed: int = 0
    checkpoint_every: int = 5000

    def __post_init__(self):
        self.loss_terms = tuple(self.loss_terms)
        if self.lambda_g < 0:
            raise ValueError("lambda_g must be non-negative")
        if self.batch < 1:
            raise ValueError("batch must be at least 1")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if LOSS_ED not in self.loss_terms:
            raise ValueError(f"loss_terms must contain {LOSS_ED}")
        for term in self.loss_terms:
            if term not in (LOSS_ED, LOSS_EG, LOSS_EW):
                raise ValueError(f"unknown loss term '{term}'")
        NetKind.parse(self.net_kind)

    @property
    def kind(self) -> NetKind:
        return NetKind.parse(self.net_kind)


def write_config(config: TrainConfig, path: str | Path) -> None:
    lines = []
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if f.name == "loss_terms":
            value = ",".join(value)
        lines.append(f"{f.name} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_config(path: str | Path) -> TrainConfig:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        raw[key] = value
    kwargs = {}
    for f in dataclasses.fields(TrainConfig):
        if f.name not in raw:
            continue
        value = raw.pop(f.name)
        if f.name == "loss_terms":
            kwargs[f.name] = tuple(t.strip() for t in value.split(",") if t.strip())
        elif f.type == "int":
            kwargs[f.name] = int(value)
        elif f.type == "float":
            kwargs[f.name] = float(value)
        else:
            kwargs[f.name] = value
    if raw:
        raise ValueError(f"unknown config keys: {sorted(raw)}")
    return TrainConfig(**kwargs)


# ---------------------------------------------------------------------------
# losses


def loss_ed(pred: Tensor, gt: Tensor) -> Tensor:
    """Mean absolute reconstruction error."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return ops.mean(ops.abs_(ops.sub(pred, gt)))


def loss_eg(pred: Tensor, gt: Tensor) -> Tensor:
    """Mean L1 distance of forward spatial differences, both axes summed.
    The trailing row/column replicates, so constant offsets contribute
    nothing."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    dx = ops.mean(ops.abs_(ops.sub(ops.forward_diff(pred, 2), ops.forward_diff(gt, 2))))
    dy = ops.mean(ops.abs_(ops.sub(ops.forward_diff(pred, 3), ops.forward_diff(gt, 3))))
    return ops.add(dx, dy)


def loss_total(
    pred: Tensor,
    gt: Tensor,
    warps: list[Tensor] | None,
    config: TrainConfig,
) -> tuple[Tensor, dict[str, float]]:
    """Combined training loss and a float snapshot of its components."""
    if (LOSS_EW in config.loss_terms) != (warps is not None):
        raise ValueError("warps must be supplied exactly when E_w is enabled")
    total = loss_ed(pred, gt)
    parts = {"e_d": total.item()}
    if LOSS_EG in config.loss_terms:
        eg = loss_eg(pred, gt)
        parts["e_g"] = eg.item()
        total = ops.add(total, ops.mul(eg, float(config.lambda_g)))
    if LOSS_EW in config.loss_terms:
        ew = None
        for warp in warps:
            term = loss_ed(warp, gt)
            ew = term if ew is None else ops.add(ew, term)
        ew = ops.mul(ew, 0.25)
        parts["e_w"] = ew.item()
        total = ops.add(total, ops.mul(ew, float(config.lambda_w)))
    parts["total"] = total.item()
    return total, parts


def wide_directional_loss(
    result: SynthesisTensors,
    corners: list[Tensor],
    coords: list[ViewCoord],
    gt: Tensor,
    n: int,
) -> tuple[Tensor, dict[str, float]]:
    """Consistency terms pushing warps under the pre-fusion horizontal and
    vertical disparities toward the target, each weighted 0.25."""
    parts = {}
    total = None
    for label, maps in (("e_wh", result.horizontal), ("e_wv", result.vertical)):
        term = None
        p_arr = np.asarray([c.p for c in coords])
        q_arr = np.asarray([c.q for c in coords])
        for idx, src in enumerate(corner_coords(n)):
            d_i = ops.channels(maps, idx, idx + 1)
            warped = warp_view(corners[idx], d_i, src, (p_arr, q_arr))
            one = loss_ed(warped, gt)
            term = one if term is None else ops.add(term, one)
        term = ops.mul(term, 0.25)
        parts[label] = term.item()
        weighted = ops.mul(term, WIDE_DIRECTIONAL_WEIGHT)
        total = weighted if total is None else ops.add(total, weighted)
    return total, parts


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def fresh(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(
            step=0,
            m={name: np.zeros_like(t.data) for name, t in params.items()},
            v={name: np.zeros_like(t.data) for name, t in params.items()},
        )

    def as_dict(self) -> dict:
        return {"step": self.step, "m": self.m, "v": self.v}


def adam_step(params: dict[str, Tensor], state: AdamState, config: TrainConfig) -> None:
    """One bias-corrected Adam update over every parameter, reading the
    populated ``grad`` buffers; missing gradients count as zero. Aborts with
    the parameter name on any non-finite gradient."""
    state.step += 1
    b1, b2, eps, lr = config.adam_beta1, config.adam_beta2, config.adam_eps, config.lr
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name in sorted(params):
        p = params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter '{name}'")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data = p.data - (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


def grad_group_norms(weights: ModelWeights) -> dict[str, float]:
    sums: dict[str, float] = {}
    for name, t in weights.params.items():
        group = name.split(".", 1)[0]
        if t.grad is not None:
            sums[group] = sums.get(group, 0.0) + float((t.grad.astype(np.float64) ** 2).sum())
        else:
            sums.setdefault(group, 0.0)
    return {g: float(np.sqrt(s)) for g, s in sums.items()}


# ---------------------------------------------------------------------------
# training loop


def _draw_batch(
    dataset: list[LightField], rng: np.random.Generator, config: TrainConfig
) -> tuple[list[Tensor], Tensor, list[ViewCoord], int]:
    corners_np = []
    targets_np = []
    coords = []
    n = dataset[0].n
    for _ in range(config.batch):
        lf = dataset[int(rng.integers(0, len(dataset)))]
        corners, target, coord = sample_training_example(lf, rng, config.patch)
        corners_np.append(corners)
        targets_np.append(target)
        coords.append(coord)
    stacked = np.stack(corners_np)  # (B, 4, 3, h, w)
    corner_tensors = [Tensor(np.ascontiguousarray(stacked[:, i])) for i in range(4)]
    return corner_tensors, Tensor(np.stack(targets_np)), coords, n


def train(
    dataset: list[LightField],
    config: TrainConfig,
    out_dir: str | Path | None = None,
) -> tuple[ModelWeights, list[dict]]:
    """Optimize a fresh model on the dataset; returns the weights and the
    per-iteration log records. With ``out_dir`` set, writes log.jsonl, the
    echoed config, periodic checkpoints, a best-smoothed-loss checkpoint and
    the final weights."""
    if not dataset:
        raise TrainingError("dataset is empty")
    n = dataset[0].n
    for lf in dataset:
        if lf.n != n:
            raise TrainingError("all light fields must share one grid size")
        if config.patch > min(lf.height, lf.width):
            raise TrainingError(f"patch {config.patch} exceeds a light field's dims")

    rng = np.random.Generator(np.random.Philox(key=[config.seed, 0x7A1]))
    weights = build(config.kind, d_max=config.d_max, seed=config.seed)
    weights.seed_lineage.append(config.seed)
    adam = AdamState.fresh(weights.params)
    wide = config.kind is NetKind.WIDE

    out_path = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        write_config(config, out_path / "config.txt")
        log_fh = open(out_path / "log.jsonl", "w")

    records: list[dict] = []
    smoothed = None
    best = np.inf
    started = time.perf_counter()
    try:
        for iteration in range(config.iterations):
            corners, gt, coords, _ = _draw_batch(dataset, rng, config)
            with Tape() as tape:
                result = run_model(weights, corners, coords, n, training=True)
                warps = result.warps if LOSS_EW in config.loss_terms else None
                loss, parts = loss_total(result.predicted, gt, warps, config)
                if wide:
                    extra, extra_parts = wide_directional_loss(result, corners, coords, gt, n)
                    loss = ops.add(loss, extra)
                    parts.update(extra_parts)
                    parts["total"] = loss.item()
            if not np.isfinite(parts["total"]):
                raise TrainingError(f"non-finite loss at iteration {iteration}")
            backward(loss, tape)
            norms = grad_group_norms(weights)
            adam_step(weights.params, adam, config)
            weights.zero_grad()

            record = {
                "iteration": iteration,
                "beta": weights.params["beta"].item() if "beta" in weights.params else None,
                "grad_norms": norms,
                "seconds": time.perf_counter() - started,
                **parts,
            }
            records.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")

            smoothed = parts["total"] if smoothed is None else 0.98 * smoothed + 0.02 * parts["total"]
            last = iteration == config.iterations - 1
            if out_path is not None and ((iteration + 1) % config.checkpoint_every == 0 or last):
                save_checkpoint(out_path / "checkpoint_latest.ckpt", weights, adam.as_dict())
                if smoothed < best:
                    best = smoothed
                    save_checkpoint(out_path / "checkpoint_best.ckpt", weights, adam.as_dict())
                if log_fh is not None:
                    log_fh.flush()
        if out_path is not None:
            save_checkpoint(out_path / "checkpoint_final.ckpt", weights, adam.as_dict())
    finally:
        if log_fh is not None:
            log_fh.close()
    return weights, records

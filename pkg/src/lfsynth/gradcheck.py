"""Central finite-difference verification of every op and the full model.

Each scenario builds small float64 tensors, reduces the op output to a
scalar through a fixed random weighting, and compares tape gradients of
probed elements against (f(x+h) - f(x-h)) / 2h. Nonsmooth points are kept
out of the probes: bilinear coordinates are pushed away from integers, |x|
away from zero, and the end-to-end loss resamples its target until every L1
term has comfortable margin from a kink.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import ops
from .lightfield import ViewCoord
from .networks import NetKind, build
from .pipeline import run_model
from .tensor import Tape, Tensor, backward
from .training import TrainConfig, loss_total

FD_STEP = 1e-5
REL_TOL = 1e-4


def _rel_err(analytic: float, numeric: float) -> float:
    scale = max(abs(analytic), abs(numeric), 1e-6)
    return abs(analytic - numeric) / scale


def _rand(rng, shape, lo=-1.0, hi=1.0, grad=True) -> Tensor:
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=grad, dtype=np.float64)


def _weighting(rng, shape) -> Tensor:
    return Tensor(rng.uniform(0.5, 1.5, shape), dtype=np.float64)


def check_scenario(
    inputs: list[Tensor],
    fn: Callable[[], Tensor],
    rng: np.random.Generator,
    probes: int = 3,
    h: float = FD_STEP,
) -> float:
    """Max relative FD error over probed elements of every input."""
    with Tape() as tape:
        loss = fn()
    backward(loss, tape)
    worst = 0.0
    for t in inputs:
        count = min(probes, t.size)
        for flat in rng.choice(t.size, size=count, replace=False):
            analytic = float(t.grad.flat[flat]) if t.grad is not None else 0.0
            original = t.data.flat[flat]
            t.data.flat[flat] = original + h
            hi = fn().item()
            t.data.flat[flat] = original - h
            lo = fn().item()
            t.data.flat[flat] = original
            numeric = (hi - lo) / (2 * h)
            worst = max(worst, _rel_err(analytic, numeric))
    return worst


# ---------------------------------------------------------------------------
# per-op scenarios; each returns (differentiable inputs, scalar closure)


def _scalarize(rng, out_fn):
    probe = {}

    def fn():
        out = out_fn()
        if "w" not in probe:
            probe["w"] = _weighting(rng, out.shape)
        return ops.sum_(ops.mul(out, probe["w"]))

    return fn


def _sc_add(rng):
    a = _rand(rng, (2, 3, 1, 4))
    b = _rand(rng, (2, 1, 5, 4))
    return [a, b], _scalarize(rng, lambda: ops.add(a, b))


def _sc_sub(rng):
    a = _rand(rng, (3, 2, 4, 1))
    b = _rand(rng, (3, 2, 1, 5))
    return [a, b], _scalarize(rng, lambda: ops.sub(a, b))


def _sc_mul(rng):
    a = _rand(rng, (2, 4, 3, 3))
    b = _rand(rng, (2, 1, 3, 3))
    return [a, b], _scalarize(rng, lambda: ops.mul(a, b))


def _sc_neg(rng):
    a = _rand(rng, (3, 4))
    return [a], _scalarize(rng, lambda: ops.neg(a))


def _sc_abs(rng):
    data = rng.uniform(0.1, 1.0, (3, 5)) * rng.choice([-1.0, 1.0], (3, 5))
    a = Tensor(data, requires_grad=True, dtype=np.float64)
    return [a], _scalarize(rng, lambda: ops.abs_(a))


def _sc_tanh(rng):
    a = _rand(rng, (2, 3, 4), lo=-2, hi=2)
    return [a], _scalarize(rng, lambda: ops.tanh(a))


def _sc_elu(rng):
    a = _rand(rng, (4, 5), lo=-2, hi=2)
    return [a], _scalarize(rng, lambda: ops.elu(a))


def _sc_clamp(rng):
    data = rng.uniform(-2, 2, (4, 4))
    data[np.abs(np.abs(data) - 1.0) < 0.05] = 0.5  # keep probes off the clip knees
    a = Tensor(data, requires_grad=True, dtype=np.float64)
    return [a], _scalarize(rng, lambda: ops.clamp(a, -1.0, 1.0))


def _sc_sum(rng):
    a = _rand(rng, (3, 2, 2))
    return [a], lambda: ops.sum_(a)


def _sc_mean(rng):
    a = _rand(rng, (2, 5, 3))
    return [a], lambda: ops.mean(a)


def _sc_concat(rng):
    parts = [_rand(rng, (2, c, 3, 3)) for c in (1, 2, 3)]
    return parts, _scalarize(rng, lambda: ops.concat(parts, axis=1))


def _sc_channels(rng):
    a = _rand(rng, (2, 5, 3, 4))
    return [a], _scalarize(rng, lambda: ops.channels(a, 1, 4))


def _sc_forward_diff(rng):
    a = _rand(rng, (2, 2, 4, 5))
    axis = int(rng.integers(2, 4))
    return [a], _scalarize(rng, lambda: ops.forward_diff(a, axis))


def _sc_conv2d(rng):
    dilation = int(rng.integers(1, 3))
    x = _rand(rng, (2, 3, 5, 4))
    k = _rand(rng, (4, 3, 3, 3))
    b = _rand(rng, (4,))
    return [x, k, b], _scalarize(rng, lambda: ops.conv2d(x, k, b, dilation))


def _sc_avg_pool(rng):
    k = int(rng.integers(2, 4))
    x = _rand(rng, (2, 2, 5, 4))  # ragged cells on purpose
    return [x], _scalarize(rng, lambda: ops.avg_pool(x, k))


def _sc_batch_norm_train(rng):
    x = _rand(rng, (2, 3, 4, 4))
    gamma = _rand(rng, (3,), lo=0.5, hi=1.5)
    beta = _rand(rng, (3,))
    state = ops.BatchNormState.fresh(3, np.float64)
    return [x, gamma, beta], _scalarize(
        rng, lambda: ops.batch_norm(x, gamma, beta, state, training=True, update_stats=False)
    )


def _sc_batch_norm_eval(rng):
    x = _rand(rng, (2, 3, 4, 4))
    gamma = _rand(rng, (3,), lo=0.5, hi=1.5)
    beta = _rand(rng, (3,))
    state = ops.BatchNormState(
        rng.uniform(-0.5, 0.5, 3).astype(np.float64),
        rng.uniform(0.5, 2.0, 3).astype(np.float64),
    )
    return [x, gamma, beta], _scalarize(
        rng, lambda: ops.batch_norm(x, gamma, beta, state, training=False)
    )


def _sc_softmax_beta(rng):
    logits = _rand(rng, (2, 4, 3, 3), lo=-1, hi=1)
    beta = Tensor(rng.uniform(0.5, 3.0), requires_grad=True, dtype=np.float64)
    return [logits, beta], _scalarize(rng, lambda: ops.softmax_beta(logits, beta))


def _away_from_integers(coords: np.ndarray, eps: float = 5e-3) -> np.ndarray:
    near = np.abs(coords - np.round(coords)) < 1e-3
    return coords + near * (0.1 + eps)


def _sc_bilinear(rng):
    img = _rand(rng, (2, 3, 5, 5))
    rows = Tensor(
        _away_from_integers(rng.uniform(-1, 5, (2, 1, 5, 5))),
        requires_grad=True, dtype=np.float64,
    )
    cols = Tensor(
        _away_from_integers(rng.uniform(-1, 5, (2, 1, 5, 5))),
        requires_grad=True, dtype=np.float64,
    )
    return [img, rows, cols], _scalarize(rng, lambda: ops.bilinear_sample(img, rows, cols))


OP_SCENARIOS: dict[str, Callable] = {
    "add": _sc_add,
    "sub": _sc_sub,
    "mul": _sc_mul,
    "neg": _sc_neg,
    "abs": _sc_abs,
    "tanh": _sc_tanh,
    "elu": _sc_elu,
    "clamp": _sc_clamp,
    "sum": _sc_sum,
    "mean": _sc_mean,
    "concat": _sc_concat,
    "channels": _sc_channels,
    "forward_diff": _sc_forward_diff,
    "conv2d": _sc_conv2d,
    "avg_pool": _sc_avg_pool,
    "batch_norm_train": _sc_batch_norm_train,
    "batch_norm_eval": _sc_batch_norm_eval,
    "softmax_beta": _sc_softmax_beta,
    "bilinear_sample": _sc_bilinear,
}


def check_op(name: str, seed: int = 0, trials: int = 20) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        inputs, fn = OP_SCENARIOS[name](rng)
        worst = max(worst, check_scenario(inputs, fn, rng))
    return worst


# ---------------------------------------------------------------------------
# end-to-end model check


def _pipeline_instance(rng, size: int = 16):
    """Random float64 model plus inputs whose L1 terms sit at least 1e-3
    from every kink, so the central difference stays on one subgradient."""
    weights = build(NetKind.PLENOPTIC, seed=int(rng.integers(0, 2**31)), dtype=np.float64)
    corners = [
        Tensor(rng.uniform(0, 1, (1, 3, size, size)), dtype=np.float64) for _ in range(4)
    ]
    coord = ViewCoord(float(rng.uniform(0.2, 1.8)), float(rng.uniform(0.2, 1.8)))
    config = TrainConfig(batch=1, patch=size, iterations=1, net_kind="plenoptic")

    def forward():
        out = run_model(weights, corners, [coord], 2, training=True, update_stats=False)
        return out.predicted

    pred = forward().data
    for _ in range(50):
        gt_data = rng.uniform(0, 1, pred.shape)
        diff = np.abs(pred - gt_data)
        grads = np.abs(np.diff(pred - gt_data, axis=2)), np.abs(np.diff(pred - gt_data, axis=3))
        if diff.min() > 1e-3 and grads[0].min() > 1e-3 and grads[1].min() > 1e-3:
            break
    gt = Tensor(gt_data, dtype=np.float64)

    def fn():
        loss, _ = loss_total(forward(), gt, None, config)
        return loss

    return weights, fn


def check_pipeline(seed: int = 0, instances: int = 20, probes_per_group: int = 2) -> float:
    """FD check of the training loss against every parameter group of the
    plenoptic model, including the softmax temperature."""
    rng = np.random.default_rng(seed + 17)
    worst = 0.0
    for _ in range(instances):
        weights, fn = _pipeline_instance(rng)
        groups = weights.param_groups()
        probe_params = []
        for names in groups.values():
            chosen = rng.choice(len(names), size=min(probes_per_group, len(names)), replace=False)
            probe_params.extend(names[i] for i in chosen)
        inputs = [weights.params[name] for name in probe_params]
        worst = max(worst, check_scenario(inputs, fn, rng, probes=1))
    return worst


def run_all(seed: int = 0, trials: int = 20, instances: int = 20) -> dict[str, float]:
    """The full suite; returns max relative error per op plus the pipeline."""
    results = {}
    for name in OP_SCENARIOS:
        started = time.perf_counter()
        results[name] = check_op(name, seed, trials)
        _ = started
    results["pipeline"] = check_pipeline(seed, instances)
    return results

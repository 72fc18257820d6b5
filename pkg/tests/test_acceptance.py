"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to watch the lines as
they appear. The two training criteria dominate the runtime (the smoke
budget is ~5 minutes, the occlusion ablation four times that per model).
"""

import json
import math
import time

import numpy as np
import pytest

from lfsynth import gradcheck
from lfsynth.lightfield import ViewCoord, corner_views, noncorner_coords
from lfsynth.metrics import mae100, psnr, ssim
from lfsynth.networks import (
    NetKind,
    PARAM_BUDGETS,
    build,
    expected_param_count,
    layer_table,
)
from lfsynth.pipeline import compose_view, run_model, synthesize, warp_view
from lfsynth.synthgen import (
    LayerSpec,
    SceneSpec,
    occluded_band_mae,
    preset_scene,
    render_lightfield,
)
from lfsynth.tensor import Tensor
from lfsynth.training import TrainConfig, train

from test_metrics import brute_mae100, brute_psnr, brute_ssim
from test_networks import PLENOPTIC_TABLE

SMOKE_ITERATIONS = 700
SMOKE_CONFIG = dict(
    lr=2e-3, batch=2, patch=32, lambda_g=0.5,
    loss_terms=("E_d", "E_g", "E_w"), d_max=4.0, seed=11,
    checkpoint_every=10**9,
)
OCCLUSION_ITERATIONS = 4 * SMOKE_ITERATIONS


def report(number: int, label: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    suffix = f"  ({detail})" if detail else ""
    print(f"[acceptance {number}] {label}: {status}{suffix}")
    assert ok, f"criterion {number} ({label}) failed: {detail}"


def test_criterion_1_gradient_suite():
    started = time.perf_counter()
    results = gradcheck.run_all(seed=0, trials=20, instances=20)
    elapsed = time.perf_counter() - started
    worst_name = max(results, key=results.get)
    ok = all(err < gradcheck.REL_TOL for err in results.values()) and elapsed < 60
    report(
        1, "finite-difference gradients",
        ok,
        f"worst {worst_name} {results[worst_name]:.2e}, {elapsed:.1f} s",
    )


def test_criterion_2_architecture_audit():
    rows = {}
    for section, *rest in layer_table(NetKind.PLENOPTIC):
        rows.setdefault(section, []).append(tuple(rest))
    table_ok = rows == {k: [tuple(r) for r in v] for k, v in PLENOPTIC_TABLE.items()}

    budgets = {
        NetKind.PLENOPTIC: 0.02,
        NetKind.SINGLE_CNN: 0.02,
        NetKind.WIDE: 0.05,
    }
    counts = {}
    budget_ok = True
    for kind, tol in budgets.items():
        built = build(kind, seed=0).trainable_count()
        counts[kind.value] = built
        budget_ok &= built == expected_param_count(kind)
        budget_ok &= abs(built / PARAM_BUDGETS[kind] - 1) <= tol
    report(
        2, "architecture audit",
        table_ok and budget_ok,
        f"plenoptic {counts['plenoptic']:,}, single {counts['single_cnn']:,}, "
        f"wide {counts['wide_baseline']:,}",
    )


def test_criterion_3_invariant_suite():
    rng = np.random.default_rng(77)
    trials_ok = True
    n = 2
    for trial in range(100):
        wide = trial >= 80
        kind = NetKind.WIDE if wide else NetKind.PLENOPTIC
        weights = build(kind, seed=int(rng.integers(0, 2**31)))
        corners = [Tensor(rng.random((1, 3, 16, 16)).astype(np.float32)) for _ in range(4)]
        coord = ViewCoord(float(rng.uniform(0, n)), float(rng.uniform(0, n)))
        out = run_model(weights, corners, [coord], n)

        masks = out.masks.data
        trials_ok &= masks.min() >= 0
        trials_ok &= np.abs(masks.sum(axis=1) - 1).max() < 1e-6
        trials_ok &= np.abs(out.disparities.data).max() <= weights.d_max

        stack = np.stack([w.data for w in out.warps])
        eps = 1e-6
        trials_ok &= bool((out.predicted.data >= stack.min(axis=0) - eps).all())
        trials_ok &= bool((out.predicted.data <= stack.max(axis=0) + eps).all())

        # warp identity: at the corner's own coordinate and at d = 0
        img = corners[0]
        d_rand = Tensor(rng.uniform(-4, 4, (1, 1, 16, 16)).astype(np.float32))
        ident = warp_view(img, d_rand, (0, 0), ViewCoord(0, 0))
        trials_ok &= np.array_equal(ident.data, img.data)
        d_zero = Tensor(np.zeros((1, 1, 16, 16), np.float32))
        ident0 = warp_view(img, d_zero, (0, 0), coord)
        trials_ok &= np.array_equal(ident0.data, img.data)
        if not trials_ok:
            break
    report(3, "synthesis invariants, 100 random trials", trials_ok)


def test_criterion_4_geometry_oracle():
    ok = True
    details = []
    # integer disparities reconstruct exactly on the all-visible mask
    for preset, seed in (("constant", 9), ("occluder", 21)):
        lf, gt = render_lightfield(preset_scene(preset, n=2, size=64), seed=seed)
        corners = [Tensor(v[None]) for v in corner_views(lf)]
        worst = 0.0
        for p, q in noncorner_coords(lf.n):
            d = Tensor(np.broadcast_to(
                gt.disparity[(p, q)][None, None], (1, 4, 64, 64)).copy())
            masks = Tensor(np.full((1, 4, 64, 64), 0.25, np.float32))
            pred, _ = compose_view(corners, [ViewCoord(float(p), float(q))], lf.n, d, masks)
            visible = gt.all_visible[(p, q)]
            worst = max(worst, 100 * np.abs(pred.data[0] - lf.view(p, q))[:, visible].mean())
        ok &= worst == 0.0
        details.append(f"{preset} {worst:.1e}")

    # fractional disparity: double bilinear resampling stays under 0.5
    frac = SceneSpec(2, 64, 64, (LayerSpec(seed=5, disparity=0.7, smoothness=3.0),))
    lf, gt = render_lightfield(frac, seed=13)
    corners = [Tensor(v[None]) for v in corner_views(lf)]
    worst = 0.0
    for p, q in noncorner_coords(lf.n):
        d = Tensor(np.broadcast_to(gt.disparity[(p, q)][None, None], (1, 4, 64, 64)).copy())
        masks = Tensor(np.full((1, 4, 64, 64), 0.25, np.float32))
        pred, _ = compose_view(corners, [ViewCoord(float(p), float(q))], lf.n, d, masks)
        visible = gt.all_visible[(p, q)]
        worst = max(worst, 100 * np.abs(pred.data[0] - lf.view(p, q))[:, visible].mean())
    ok &= worst < 0.5
    details.append(f"fractional {worst:.3f}")
    report(4, "ground-truth warp reconstruction", ok, ", ".join(details))


@pytest.fixture(scope="module")
def smoke_scene():
    return render_lightfield(preset_scene("constant", n=2, size=64), seed=9)


def test_criterion_5_learning_smoke(smoke_scene):
    lf, gt = smoke_scene
    assert SMOKE_ITERATIONS <= 5000
    config = TrainConfig(iterations=SMOKE_ITERATIONS, net_kind="plenoptic", **SMOKE_CONFIG)
    started = time.perf_counter()
    weights, records = train([lf], config)
    elapsed = time.perf_counter() - started

    psnrs = []
    disp_errs = []
    for p, q in noncorner_coords(lf.n):
        result = synthesize(weights, corner_views(lf), ViewCoord(float(p), float(q)), lf.n)
        pred = np.clip(result.predicted, 0, 1)
        psnrs.append(psnr(pred, lf.view(p, q)))
        visible = gt.all_visible[(p, q)]
        err = np.abs(result.disparities - gt.disparity[(p, q)][None])[:, visible]
        disp_errs.append(float(np.median(err)))
    loss_ratio = records[-1]["total"] / records[0]["total"]
    ok = (
        elapsed < 1800
        and min(psnrs) >= 30.0
        and max(disp_errs) <= 0.25
        and loss_ratio < 0.10
    )
    report(
        5, "constant-scene overfit",
        ok,
        f"{elapsed / 60:.1f} min, PSNR min {min(psnrs):.1f} dB, "
        f"median |d err| max {max(disp_errs):.3f} px, "
        f"loss ratio {loss_ratio:.3f}",
    )


def test_criterion_6_occlusion_ablation_trend():
    lf, gt = render_lightfield(preset_scene("occluder_soft", n=2, size=64), seed=21)

    def band_mae(kind: str) -> float:
        config = TrainConfig(
            iterations=OCCLUSION_ITERATIONS, net_kind=kind,
            lr=2e-3, batch=2, patch=32, lambda_g=0.5,
            loss_terms=("E_d", "E_g"), d_max=4.0, seed=33,
            checkpoint_every=10**9,
        )
        weights, _ = train([lf], config)
        total = 0.0
        pixels = 0
        for p, q in noncorner_coords(lf.n):
            result = synthesize(weights, corner_views(lf), ViewCoord(float(p), float(q)), lf.n)
            pred = np.clip(result.predicted, 0, 1)
            occ, _ = occluded_band_mae(pred, lf.view(p, q), gt.occlusion[(p, q)])
            band_px = gt.occlusion[(p, q)].any(axis=0).sum()
            total += occ * band_px
            pixels += band_px
        return total / pixels

    four = band_mae("plenoptic")
    one = band_mae("single_disparity")
    report(
        6, "four-disparity occluded-band advantage",
        four < one,
        f"four maps {four:.3f} vs one map {one:.3f} MAE100",
    )


def test_criterion_7_metric_oracle():
    rng = np.random.default_rng(2024)
    ok = True
    for _ in range(50):
        shape = (int(rng.integers(1, 4)), int(rng.integers(11, 18)), int(rng.integers(11, 18)))
        a = rng.random(shape)
        b = np.clip(a + rng.normal(0, 0.2, shape), 0, 1)
        ok &= abs(mae100(a, b) - brute_mae100(a, b)) < 1e-10
        ok &= abs(psnr(a, b) - brute_psnr(a, b)) < 1e-8
        ok &= abs(ssim(a, b) - brute_ssim(a, b)) < 1e-6

    # hand-computed examples hold exactly
    base = np.zeros((3, 12, 12))
    ok &= mae100(base + 0.01, base) == pytest.approx(1.0, abs=1e-12)
    ok &= psnr(base + 0.1, base) == pytest.approx(20.0, abs=1e-9)
    ok &= psnr(base, base) == math.inf
    mu1, mu2 = 0.3, 0.5
    expected = (2 * mu1 * mu2 + 1e-4) / (mu1**2 + mu2**2 + 1e-4)
    ok &= ssim(np.full((1, 12, 12), mu1), np.full((1, 12, 12), mu2)) == pytest.approx(
        expected, abs=1e-12)
    report(7, "metrics match brute-force oracle", bool(ok))


def test_criterion_8_training_determinism(tmp_path, smoke_scene):
    lf, _ = smoke_scene
    config = TrainConfig(
        iterations=40, net_kind="plenoptic",
        lr=1e-3, batch=1, patch=24, seed=2024, checkpoint_every=10**9,
    )
    curves = []
    for run in ("a", "b"):
        train([lf], config, out_dir=tmp_path / run)
        lines = (tmp_path / run / "log.jsonl").read_text().strip().splitlines()
        curves.append([json.loads(line)["total"] for line in lines])
    ok = curves[0] == curves[1]
    report(8, "bit-exact loss curve under fixed seed", ok)

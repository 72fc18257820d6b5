"""Dataset model, loading, gamma handling, sampling, planes."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lfsynth.lightfield import (
    LightField,
    LightFieldError,
    LoadError,
    ViewCoord,
    corner_views,
    draw_training_coords,
    load_lightfield,
    make_planes,
    noncorner_coords,
    read_float_raster,
    sample_training_example,
    save_lightfield,
    write_float_raster,
)


def _toy_lightfield(rng, rows=3, size=20):
    views = rng.random((rows, rows, 3, size, size)).astype(np.float32)
    return LightField(views)


class TestGamma:
    def test_fixed_points(self, tmp_path, rng):
        lf = _toy_lightfield(rng)
        save_lightfield(lf, tmp_path / "d")
        # force re-correction by flipping the manifest flag
        manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
        manifest["gamma_applied"] = False
        (tmp_path / "d" / "manifest.json").write_text(json.dumps(manifest))
        loaded = load_lightfield(tmp_path / "d", gamma=0.4)
        # 0 and 1 are fixed points of the power; everything stays in range
        assert loaded.views.min() >= 0 and loaded.views.max() <= 1
        quantized = np.round(lf.views * 255) / 255
        assert np.allclose(loaded.views, quantized**0.4, atol=1e-6)

    def test_quarter_power(self):
        assert 0.25**0.4 == pytest.approx(0.57435, abs=5e-6)

    @given(st.floats(0, 1), st.floats(0, 1))
    @settings(max_examples=50, deadline=None)
    def test_monotone(self, a, b):
        ga, gb = a**0.4, b**0.4
        assert (a <= b) == (ga <= gb) or math.isclose(a, b)

    def test_gamma_applied_flag_skips_correction(self, tmp_path, rng):
        lf = _toy_lightfield(rng)
        save_lightfield(lf, tmp_path / "d")
        loaded = load_lightfield(tmp_path / "d", gamma=0.4)
        quantized = np.round(lf.views * 255) / 255
        assert np.allclose(loaded.views, quantized, atol=1e-7)

    def test_invalid_gamma(self, tmp_path, rng):
        save_lightfield(_toy_lightfield(rng), tmp_path / "d")
        with pytest.raises(LightFieldError):
            load_lightfield(tmp_path / "d", gamma=0.0)


class TestRoundTrip:
    def test_load_save_load_bit_exact(self, tmp_path, rng):
        lf = _toy_lightfield(rng, size=16)
        save_lightfield(lf, tmp_path / "a")
        first = load_lightfield(tmp_path / "a")
        save_lightfield(first, tmp_path / "b")
        second = load_lightfield(tmp_path / "b")
        assert np.array_equal(first.views, second.views)

    def test_missing_view_named(self, tmp_path, rng):
        save_lightfield(_toy_lightfield(rng), tmp_path / "d")
        (tmp_path / "d" / "view_1_2.png").unlink()
        with pytest.raises(LoadError, match="view_1_2"):
            load_lightfield(tmp_path / "d")

    def test_malformed_manifest(self, tmp_path, rng):
        save_lightfield(_toy_lightfield(rng), tmp_path / "d")
        (tmp_path / "d" / "manifest.json").write_text("{nope")
        with pytest.raises(LoadError):
            load_lightfield(tmp_path / "d")

    def test_inconsistent_dims(self, tmp_path, rng):
        save_lightfield(_toy_lightfield(rng), tmp_path / "d")
        manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
        manifest["width"] = 99
        (tmp_path / "d" / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(LoadError, match="view_0_0"):
            load_lightfield(tmp_path / "d")


class TestCorners:
    def test_seven_grid(self, rng):
        lf = _toy_lightfield(rng, rows=7, size=8)
        c00, c0n, cn0, cnn = corner_views(lf)
        assert np.array_equal(c00, lf.view(0, 0))
        assert np.array_equal(c0n, lf.view(0, 6))
        assert np.array_equal(cn0, lf.view(6, 0))
        assert np.array_equal(cnn, lf.view(6, 6))

    def test_three_grid(self, rng):
        lf = _toy_lightfield(rng, rows=3, size=8)
        corners = corner_views(lf)
        assert len(corners) == 4
        assert np.array_equal(corners[1], lf.view(0, 2))

    def test_degenerate_two_grid(self, rng):
        lf = _toy_lightfield(rng, rows=2, size=8)
        assert len(corner_views(lf)) == 4
        assert len(noncorner_coords(lf.n)) == 0
        with pytest.raises(LightFieldError):
            draw_training_coords(np.random.default_rng(0), lf.n)


class TestSampling:
    def test_never_a_corner_bulk(self):
        rng = np.random.default_rng(99)
        coords = draw_training_coords(rng, 6, count=1_000_000)
        corners = {(0, 0), (0, 6), (6, 0), (6, 6)}
        assert not any((int(p), int(q)) in corners for p, q in coords[:2000])
        flat = coords[:, 0] * 7 + coords[:, 1]
        corner_flat = {0, 6, 42, 48}
        assert not np.isin(flat, list(corner_flat)).any()

    def test_uniform_within_binomial_bounds(self):
        rng = np.random.default_rng(4)
        n_draws = 100_000
        coords = draw_training_coords(rng, 6, count=n_draws)
        flat = coords[:, 0] * 7 + coords[:, 1]
        counts = np.bincount(flat, minlength=49)
        p = 1 / 45
        sigma = math.sqrt(n_draws * p * (1 - p))
        inner = counts[counts > 0]
        assert len(inner) == 45
        assert np.abs(inner - n_draws * p).max() <= 3 * sigma

    def test_shared_window(self, rng):
        base = rng.random((1, 3, 16, 16)).astype(np.float32)
        views = np.broadcast_to(base, (3, 3, 3, 16, 16)).copy()
        lf = LightField(views)
        corners, target, coord = sample_training_example(lf, np.random.default_rng(0), 8)
        for c in corners:
            assert np.array_equal(c, target)

    def test_patch_equal_to_dims_single_window(self, rng):
        lf = _toy_lightfield(rng, size=12)
        corners, target, coord = sample_training_example(lf, np.random.default_rng(0), 12)
        assert target.shape == (3, 12, 12)
        assert np.array_equal(target, lf.view(int(coord.p), int(coord.q)))

    def test_oversize_patch_rejected(self, rng):
        lf = _toy_lightfield(rng, size=12)
        with pytest.raises(LightFieldError):
            sample_training_example(lf, np.random.default_rng(0), 13)


class TestPlanes:
    @pytest.mark.parametrize(
        "p,q", [(3.0, 3.0), (0.0, 6.0), (2.5, 1.5)]
    )
    def test_constant_planes(self, p, q):
        planes = make_planes(ViewCoord(p, q), 4, 5)
        assert planes.P.shape == (4, 5) and planes.Q.shape == (4, 5)
        assert (planes.P == p).all() and (planes.Q == q).all()


class TestFloatRaster:
    def test_roundtrip(self, tmp_path, rng):
        arr = rng.standard_normal((4, 6, 5)).astype(np.float32)
        write_float_raster(tmp_path / "x.raster", arr)
        back = read_float_raster(tmp_path / "x.raster")
        assert np.array_equal(arr, back)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "junk.raster").write_bytes(b"nope" + b"\0" * 16)
        with pytest.raises(LoadError):
            read_float_raster(tmp_path / "junk.raster")

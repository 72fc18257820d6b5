import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def constant_scene():
    from lfsynth.synthgen import preset_scene, render_lightfield

    spec = preset_scene("constant", n=2, size=48)
    return render_lightfield(spec, seed=5)


@pytest.fixture(scope="session")
def occluder_scene():
    from lfsynth.synthgen import preset_scene, render_lightfield

    spec = preset_scene("occluder", n=2, size=64)
    return render_lightfield(spec, seed=7)


@pytest.fixture(scope="session")
def plenoptic_weights():
    from lfsynth.networks import NetKind, build

    return build(NetKind.PLENOPTIC, seed=42)

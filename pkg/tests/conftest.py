import numpy as np
import pytest

from mion import body, camera, pool, synth


@pytest.fixture(scope="session")
def toy_model():
    return body.make_toy_model(7)


@pytest.fixture(scope="session")
def desk_intrinsics():
    return camera.Intrinsics(2500.0, 56.0, 56.0)


@pytest.fixture(scope="session")
def sampler(toy_model):
    return pool.PoseSampler(toy_model, seed=11)


@pytest.fixture(scope="session")
def small_pool(toy_model, sampler):
    motions = sampler.motions(600, seed=1)
    return pool.build_pool(motions, p=32, o=8, seed=3, model=toy_model)


@pytest.fixture(scope="session")
def synth_cfg(desk_intrinsics):
    return synth.SynthConfig(image_hw=112, intrinsics=desk_intrinsics,
                             noise=synth.NoiseConfig(j2d_sigma=2.0, dropout_prob=0.02))


@pytest.fixture(scope="session")
def labeled_sample(toy_model, sampler, synth_cfg):
    return synth.gen_sample(toy_model, sampler, synth_cfg, seed=5, index=0)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mdal import segnet
from mdal.params import Arch

settings.register_profile("mdal", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("mdal")

SMALL = Arch((3, 4, 4, 1))


@pytest.fixture
def small_arch():
    return SMALL


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_frame(rng, h=8, w=8):
    return rng.random((h, w, 3))


def random_mask(rng, h=8, w=8, p=0.3):
    m = (rng.random((h, w)) < p).astype(np.uint8)
    if not m.any():
        m[h // 2, w // 2] = 1
    return m


def random_theta(seed, arch=SMALL, bias_scale=0.1):
    th = segnet.init_params(arch, seed)
    r = np.random.default_rng(seed + 99)
    return th.map(lambda a: a + (bias_scale * r.standard_normal(a.shape) if a.ndim == 1 else 0.0))


TINY_SPEC = dict(height=20, width=20, length=8, tool_count=(1, 2), tool_length=(12.0, 20.0),
                 tool_width=(3.0, 5.0), bg_noise_scale=6.0)


def tiny_spec(name="srcA", **kw):
    import dataclasses

    from mdal.synthvid import REFERENCE_SPECS
    return dataclasses.replace(REFERENCE_SPECS[name], **{**TINY_SPEC, **kw})


@pytest.fixture(scope="session")
def tiny_source():
    from mdal.synthvid import render_sequence
    return [render_sequence(tiny_spec("srcA"), 100 + k) for k in range(3)]


@pytest.fixture(scope="session")
def tiny_target():
    from mdal.synthvid import render_sequence
    return [render_sequence(tiny_spec("tgtB"), 200 + k) for k in range(3)]


@pytest.fixture(scope="session")
def tiny_meta_state(tiny_source):
    from mdal.metatrain import MetaConfig, meta_train
    cfg = MetaConfig(beta_theta=3e-3, beta_alpha=1e-4, alpha_init=1e-3, iterations=40, decay_at=30,
                     alpha_nonneg=True, eps_range=(2, 4), seed=0)
    return meta_train(tiny_source, cfg)

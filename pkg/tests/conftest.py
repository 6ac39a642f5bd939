import numpy as np
import pytest
import torch

import noisemix as nm
from noisemix.seeding import child_rng


@pytest.fixture(scope="session")
def small_sched():
    """Short schedule so reverse loops stay fast in unit tests."""
    return nm.make_linear_schedule(50)


@pytest.fixture(scope="session")
def std_sched():
    return nm.make_linear_schedule(1000)


@pytest.fixture(scope="session")
def tiny_config(small_sched):
    return nm.DenoiserConfig(
        widths=(3, 2), num_segments=4, model_dim=16, layers=2, heads=2, T=small_sched.T
    )


@pytest.fixture()
def tiny_module(tiny_config):
    return nm.init_denoiser(tiny_config, 3)


def randomize_modulation(module, seed=11, std=0.05):
    """Give the zero-initialized modulation maps some effect, so conditioning
    and attention paths are live in behavioural tests."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if "modulation" in name and name.endswith("weight"):
                p.normal_(0.0, std, generator=g)
    return module


@pytest.fixture()
def live_module(tiny_config):
    return randomize_modulation(nm.init_denoiser(tiny_config, 3))


@pytest.fixture(scope="session")
def tiny_dataset():
    cfg = nm.CoupledConfig(num_segments=4, d1=3, d2=2)
    return nm.gen_coupled(cfg, 64, child_rng(0, "tiny-data"))


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)

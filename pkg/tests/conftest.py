import numpy as np
import pytest
import torch
from hypothesis import settings

from portraitgen.denoiser import DESK_GRADCHECK, DenoiserConfig
from portraitgen.conditioning import TextEncoder
from portraitgen.model import PortraitModel
from portraitgen.schedule import build_schedule

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

torch.set_num_threads(1)


def tiny_model(dtype=torch.float64, seed=0, T=100, output="v", zero_init_out=False):
    """A gradient-check sized model (UNet under 5k parameters, small head)."""
    torch.manual_seed(seed)
    cfg = DenoiserConfig(**DESK_GRADCHECK, skip_schedule=(1e-3, 0.05, T), output=output,
                         zero_init_out=zero_init_out)
    model = PortraitModel(cfg, build_schedule(T, 1e-3, 0.05), TextEncoder(dim=cfg.text_dim), head_hidden=16)
    return model.to(dtype)


def fd_agrees(analytic: float, fd: float, loss_value: float, h: float, rel: float = 1e-4) -> bool:
    """Relative agreement, with an absolute floor at the difference quotient's roundoff.

    Parameters whose gradient is structurally zero (for instance a bias
    feeding a per-channel normalization) leave only float64 roundoff in the
    central difference, about eps * |L| / h.
    """
    floor = 10 * np.finfo(np.float64).eps * max(abs(loss_value), 1.0) / h
    return abs(analytic - fd) <= rel * max(abs(analytic), abs(fd)) or abs(analytic - fd) <= floor


@pytest.fixture
def small_model():
    return tiny_model()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

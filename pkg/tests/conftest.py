import numpy as np
import pytest
import torch

from facepers.denoiser import Denoiser, DenoiserConfig
from facepers.diffusion import make_schedule

torch.set_num_threads(1)

TINY = dict(channels=(8, 8, 8), token_dim=8, head_dim=8, norm_groups=4)


def tiny_model(seed: int = 0, dtype=torch.float32, **kw) -> Denoiser:
    torch.manual_seed(seed)
    return Denoiser(DenoiserConfig(**{**TINY, **kw})).to(dtype).eval()


def randomize(module: torch.nn.Module, seed: int = 0, std: float = 0.3):
    """Perturb every parameter, including zero-initialized gains and SFT heads."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(std * torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype))
    return module


@pytest.fixture(scope="session")
def sched():
    return make_schedule()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)

import numpy as np
import pytest
import torch

from hflic.model import build_model
from hflic.training import CropDataset, TrainConfig, TrainStage, train_base
from hflic.transforms import TransformConfig


def synthetic_image(seed: int, size: int = 96) -> torch.Tensor:
    """Compressible test content: smooth waves, blobs, mild noise, in [0, 1]."""
    g = torch.Generator().manual_seed(seed)
    yy, xx = torch.meshgrid(
        torch.linspace(0, 1, size), torch.linspace(0, 1, size), indexing="ij"
    )
    img = torch.zeros(3, size, size)
    for c in range(3):
        a, b, phase = torch.rand(3, generator=g) * 6
        img[c] = 0.5 + 0.25 * torch.sin(a * xx * 3.14 + phase) * torch.cos(b * yy * 3.14)
    for _ in range(4):
        cx, cy, r = torch.rand(3, generator=g)
        blob = torch.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (0.02 + 0.05 * r))
        img += 0.3 * blob * (torch.rand(3, 1, 1, generator=g) - 0.5)
    img += 0.02 * torch.randn(3, size, size, generator=g)
    return img.clamp(0, 1)


@pytest.fixture(scope="session")
def desk_model():
    torch.manual_seed(1234)
    return build_model(TransformConfig())


@pytest.fixture(scope="session")
def tiny_model():
    torch.manual_seed(99)
    return build_model(TransformConfig(n_channels=16, m_channels=16, z_channels=8))


@pytest.fixture(scope="session")
def trained_ckpt():
    """A briefly trained desk model, shared by ordering-sensitive tests."""
    imgs = [synthetic_image(i) for i in range(8)]
    cfg = TrainConfig(schedule=(TrainStage(75, 1e-4),), batch_size=4, seed=0, lam=0.015)
    return train_base(CropDataset(imgs), cfg)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    from tests.acceptance_report import format_lines

    lines = format_lines()
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

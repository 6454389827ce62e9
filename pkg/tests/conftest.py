import numpy as np
import pytest
import torch

from larnet.dataio import SyntheticSpec, generate_synthetic_dataset
from larnet.networks import ModelConfig


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Two classes, three 20-frame videos each, one held out per class."""
    out = tmp_path_factory.mktemp("tiny_data")
    spec = SyntheticSpec(num_classes=2, videos_per_class=3, frames_per_video=20, test_fraction=0.34, seed=5)
    return generate_synthetic_dataset(spec, str(out))


@pytest.fixture
def small_cfg():
    return ModelConfig(resolution=32, clip_len=8, base_channels=16, embed_dim=4, z_dim=8, critic_channels=4)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


def pytest_terminal_summary(terminalreporter):
    import sys

    lines = [line for name, mod in list(sys.modules.items()) if name.endswith("test_acceptance")
             for line in getattr(mod, "RESULTS", [])]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

import sys
from pathlib import Path

import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)


class TinyTranslator(nn.Module):
    """39-parameter stride-2 encoder/decoder for gradient checks."""

    def __init__(self, channels=1, padding_mode="zeros"):
        super().__init__()
        self.down = nn.Conv2d(channels, 2, 3, stride=2, padding=1, padding_mode=padding_mode)
        self.up = nn.Conv2d(2, channels, 3, padding=1, padding_mode=padding_mode)

    def forward(self, x):
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        h = torch.tanh(self.down(x))
        out = torch.tanh(self.up(F.interpolate(h, size=x.shape[-2:], mode="nearest")))
        return out.squeeze(0) if squeeze else out


@pytest.fixture
def tiny_translator():
    torch.manual_seed(0)
    return TinyTranslator().double()


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training experiments")

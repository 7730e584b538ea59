import numpy as np
import pytest
import torch
from torch import nn

from asos.data import SynthConfig, generate_synthetic
from asos.model import ModelConfig, build_model


def tiny_config(n_in=3, n_m=3, tile_size=64):
    return ModelConfig(n_in=n_in, n_m=n_m, widths=(4, 4, 4, 4), bottleneck=8, tile_size=tile_size)


def tiny_model(n_in=3, n_m=3, tile_size=64, seed=0, double=False):
    model = build_model(tiny_config(n_in, n_m, tile_size), seed=seed).eval()
    return model.double() if double else model


class LinearToy(nn.Module):
    """sigmoid(<weights, mean activation> + bias): a frozen, analysable classifier."""

    def __init__(self, weights=(1.0, 0.5, -0.7), bias=0.1, scale=5.0):
        super().__init__()
        self.w = nn.Parameter(torch.tensor(weights, dtype=torch.float64), requires_grad=False)
        self.b = bias
        self.scale = scale

    def forward(self, a):  # (B, n_m, h, w)
        pooled = a.mean(dim=(2, 3))
        return torch.sigmoid(self.scale * (pooled @ self.w) + self.b)


@pytest.fixture(scope="session")
def synth_small():
    return generate_synthetic(SynthConfig(n_samples=20, size=64, n_in=3, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

"""Shared fixtures: tiny models and a small synthetic dataset."""

import pytest
import torch
import torch.nn as nn

from robustlab.data import DatasetSpec, generate_synthetic_dataset
from robustlab.models import ModelConfig, build_model


def linear_probe(input_shape, num_classes, seed=0):
    """Seeded flatten + linear classifier, handy as an analytic attack target."""
    torch.manual_seed(seed)
    d = 1
    for s in input_shape:
        d *= s
    model = nn.Sequential(nn.Flatten(), nn.Linear(d, num_classes))
    return model.eval()


def rand_batch(n, shape, seed=0, lo=0.25, hi=0.75):
    """Random images kept away from the box edges."""
    g = torch.Generator().manual_seed(seed)
    return lo + (hi - lo) * torch.rand((n,) + tuple(shape), generator=g)


def tiny_config(family="resnet_ladder", **kw):
    fields = dict(
        family=family,
        stage_blocks=(1, 1, 1, 1),
        embed_dim=8,
        num_heads=2,
        token_size=8,
        input_size=(3, 32, 32),
        num_classes=3,
    )
    fields.update(kw)
    return ModelConfig(**fields)


@pytest.fixture(scope="session")
def tiny_model():
    return build_model(tiny_config(), seed=0)


@pytest.fixture(scope="session")
def shapes96():
    spec = DatasetSpec(source="synthetic_shapes", num_samples=96,
                       image_size=(32, 32), num_classes=3, seed=0)
    return generate_synthetic_dataset(spec)

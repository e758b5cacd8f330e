"""Shared fixtures: a tiny model configuration and small synthetic datasets."""

import os

import numpy as np
import pytest
import torch

from src.config import SynthConfig, TrainConfig
from src.data import build_datasets, generate_synthetic_dataset, write_synthetic_dataset
from src.model import PhotoToSketchModel
from src.sketch_vector import AbsPoint, absolute_to_offsets


@pytest.fixture
def tiny_config() -> TrainConfig:
    """64x64 photos (2x2 attention grid), d_h 8, M 2; fast enough for CPU tests."""
    return TrainConfig(
        lr=1e-3,
        batch_size=2,
        epochs=1,
        T_max=48,
        M=2,
        image_side=64,
        channels=(8, 8, 8),
        hidden_size=8,
        attention_size=8,
        probe_epochs=1,
        finetune_epochs=1,
        synth=SynthConfig(canvas=64, n_train=4, n_val=0, n_test=2, seed=0),
    )


@pytest.fixture
def tiny_model(tiny_config) -> PhotoToSketchModel:
    torch.manual_seed(0)
    model = PhotoToSketchModel(tiny_config).double()
    model.eval()
    return model


@pytest.fixture
def photos() -> torch.Tensor:
    """Two random 64x64 photos in float64."""
    generator = torch.Generator().manual_seed(1)
    return torch.rand((2, 3, 64, 64), generator=generator, dtype=torch.float64)


@pytest.fixture
def square_sketch():
    """A closed square outline of side 20 starting at (10, 10)."""
    return [
        AbsPoint(10.0, 10.0, 1),
        AbsPoint(30.0, 10.0, 0),
        AbsPoint(30.0, 30.0, 0),
        AbsPoint(10.0, 30.0, 0),
        AbsPoint(10.0, 10.0, 0),
    ]


@pytest.fixture
def sketch_batch(square_sketch):
    """Teacher-forcing inputs for two photos: N x T x 5 points and N x T mask."""
    seq = absolute_to_offsets(square_sketch, 10.0, (64, 64))
    points = np.zeros((2, 6, 5))
    points[0, :5] = seq.points
    points[1, :3] = seq.points[[0, 1, 4]]
    mask = np.zeros((2, 6))
    mask[0, :5] = 1.0
    mask[1, :3] = 1.0
    return torch.from_numpy(points), torch.from_numpy(mask)


@pytest.fixture
def synthetic_samples(tiny_config):
    return generate_synthetic_dataset(tiny_config.synth)


@pytest.fixture
def synthetic_datasets(synthetic_samples, tiny_config):
    return build_datasets(synthetic_samples, tiny_config)


@pytest.fixture
def synthetic_dir(tmp_path, tiny_config):
    """A synthetic dataset written to disk; returns the manifest path."""
    manifest_path, _ = write_synthetic_dataset(tiny_config.synth, tmp_path / "data")
    return manifest_path


@pytest.fixture
def clean_env(monkeypatch, tmp_path):
    """No SKETCHSAL_* variables and no .env file in scope."""
    for key in list(os.environ):
        if key.startswith("SKETCHSAL_"):
            monkeypatch.delenv(key)
    return str(tmp_path / "nonexistent.env")

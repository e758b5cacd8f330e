"""Unit tests for the photo encoder."""

import pytest
import torch

from src.config import TrainConfig
from src.encoder import PhotoEncoder, build_encoder, global_pool
from src.errors import ConfigError, DependencyError, FileSystemError, ShapeError


class TestPhotoEncoder:
    """Tests for PhotoEncoder.encode()."""

    def test_pyramid_shapes(self, tiny_config):
        """Test the three maps sit at 1/32, 1/16 and 1/8 of the photo side."""
        encoder = PhotoEncoder(tiny_config)

        pyramid = encoder.encode(torch.rand(3, 3, 64, 64))

        assert pyramid.f_l.shape == (3, 8, 2, 2)
        assert pyramid.f_lm1.shape == (3, 8, 4, 4)
        assert pyramid.f_lm2.shape == (3, 8, 8, 8)
        assert pyramid.grid == (2, 2)

    def test_full_backbone_layout(self):
        """Test the VGG-16 layout taps pool3, pool4 and pool5."""
        encoder = PhotoEncoder(TrainConfig.full_scale())

        pyramid = encoder.encode(torch.rand(1, 3, 64, 64))

        assert pyramid.f_l.shape == (1, 512, 2, 2)
        assert pyramid.f_lm1.shape == (1, 512, 4, 4)
        assert pyramid.f_lm2.shape == (1, 256, 8, 8)

    def test_photos_are_processed_independently(self, tiny_config):
        """Test each photo's features do not depend on its batch mates."""
        torch.manual_seed(0)
        encoder = PhotoEncoder(tiny_config).double()
        photos = torch.rand(2, 3, 64, 64, dtype=torch.float64)

        together = encoder.encode(photos).f_l
        alone = encoder.encode(photos[1:]).f_l

        assert torch.allclose(together[1:], alone)

    @pytest.mark.parametrize("shape", [(1, 3, 48, 64), (1, 1, 64, 64), (3, 64, 64)])
    def test_rejects_bad_shapes(self, tiny_config, shape):
        """Test sides not divisible by 32 and wrong layouts are refused."""
        with pytest.raises(ShapeError):
            PhotoEncoder(tiny_config).encode(torch.rand(*shape))

    def test_initial_state(self, tiny_config):
        """Test h0 and c0 are tanh projections of the pooled coarse map."""
        encoder = PhotoEncoder(tiny_config)
        f_l = torch.rand(2, 8, 2, 2)

        state = encoder.init_decoder_state(global_pool(f_l))

        assert state.h.shape == (2, tiny_config.hidden_size)
        assert state.c.shape == (2, tiny_config.hidden_size)
        assert torch.allclose(state.h, torch.tanh(encoder.init_h(f_l.mean(dim=(-2, -1)))))
        assert bool((state.c.abs() < 1).all())

    def test_unknown_backbone(self):
        """Test an unknown backbone name is a configuration error."""
        with pytest.raises(ConfigError):
            PhotoEncoder(TrainConfig(backbone="resnet"))


class TestPretrainedWeights:
    """Tests for loading VGG-16 weights."""

    def test_loads_features_prefix(self, tmp_path):
        """Test a torchvision-style state dict is imported."""
        source = PhotoEncoder(TrainConfig.full_scale())
        path = tmp_path / "vgg16.pth"
        torch.save({f"features.{k}": v for k, v in source.features.state_dict().items()}, path)

        encoder = build_encoder(TrainConfig.full_scale(), str(path))

        for a, b in zip(encoder.features.parameters(), source.features.parameters()):
            assert torch.equal(a, b)

    def test_incompatible_weights(self, tmp_path):
        """Test a state dict with the wrong layout is a dependency error."""
        path = tmp_path / "other.pth"
        torch.save({"features.0.weight": torch.zeros(1)}, path)

        with pytest.raises(DependencyError, match="VGG-16 layout"):
            build_encoder(TrainConfig.full_scale(), str(path))

    def test_missing_file(self, tmp_path):
        """Test a missing weight file is reported."""
        with pytest.raises(FileSystemError, match="not found"):
            build_encoder(TrainConfig.full_scale(), str(tmp_path / "absent.pth"))

    def test_tiny_backbone_refuses_weights(self, tiny_config, tmp_path):
        """Test pretrained weights only apply to the full backbone."""
        with pytest.raises(ConfigError):
            build_encoder(tiny_config, str(tmp_path / "vgg16.pth"))

"""Convolutional photo encoder.

Produces the three-level feature pyramid taken after the last three
pooling stages, the global descriptor f_g, and the decoder's initial state
h_0 = tanh(W_k f_g + b_k), c_0 = tanh(W_c f_g + b_c).
"""

from pathlib import Path
from typing import List, Optional, Tuple

import torch
import torch.nn as nn

from src.config import FULL_CHANNELS, TrainConfig
from src.errors import CheckpointError, ConfigError, DependencyError, FileSystemError, ShapeError
from src.state import DecoderState, FeaturePyramid


# VGG-16 feature layout; "M" is a 2x2 max-pool.
VGG16_LAYOUT = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"]


def _vgg16_features() -> Tuple[nn.Sequential, List[int]]:
    layers: List[nn.Module] = []
    taps = []
    in_channels = 3
    for item in VGG16_LAYOUT:
        if item == "M":
            layers.append(nn.MaxPool2d(kernel_size=2, stride=2))
            taps.append(len(layers) - 1)
        else:
            layers.append(nn.Conv2d(in_channels, item, kernel_size=3, padding=1))
            layers.append(nn.ReLU(inplace=True))
            in_channels = item
    # pool3, pool4, pool5
    return nn.Sequential(*layers), taps[2:]


def _tiny_features(channels: Tuple[int, int, int]) -> Tuple[nn.Sequential, List[int]]:
    c_l, c_lm1, c_lm2 = channels
    stem = max(c_lm2 // 2, 4)
    layers = [
        nn.Conv2d(3, stem, kernel_size=3, stride=2, padding=1), nn.ReLU(),
        nn.Conv2d(stem, c_lm2, kernel_size=3, stride=2, padding=1), nn.ReLU(),
        nn.Conv2d(c_lm2, c_lm2, kernel_size=3, padding=1), nn.ReLU(),
        nn.MaxPool2d(kernel_size=2, stride=2),
        nn.Conv2d(c_lm2, c_lm1, kernel_size=3, padding=1), nn.ReLU(),
        nn.MaxPool2d(kernel_size=2, stride=2),
        nn.Conv2d(c_lm1, c_l, kernel_size=3, padding=1), nn.ReLU(),
        nn.Conv2d(c_l, c_l, kernel_size=3, padding=1), nn.ReLU(),
        nn.MaxPool2d(kernel_size=2, stride=2),
    ]
    return nn.Sequential(*layers), [6, 9, 14]


class PhotoEncoder(nn.Module):
    """Backbone plus the decoder-state projections (W_k, b_k) and (W_c, b_c).

    The backbone is either the VGG-16 layout ("full") or a six-convolution,
    three-pool network ("tiny"); downstream code depends only on the
    pyramid shapes. No normalization or dropout layers, so inference is
    deterministic.
    """

    def __init__(self, config: TrainConfig):
        super().__init__()
        self.backbone_kind = config.backbone
        if config.backbone == "full":
            self.features, self.taps = _vgg16_features()
            self.channels = FULL_CHANNELS
        elif config.backbone == "tiny":
            self.features, self.taps = _tiny_features(tuple(config.channels))
            self.channels = tuple(config.channels)
        else:
            raise ConfigError(f"Unknown backbone '{config.backbone}'")
        self.init_h = nn.Linear(self.channels[0], config.hidden_size)
        self.init_c = nn.Linear(self.channels[0], config.hidden_size)

    def backbone_parameters(self):
        return self.features.parameters()

    def forward(self, photos: torch.Tensor) -> FeaturePyramid:
        return self.encode(photos)

    def encode(self, photos: torch.Tensor) -> FeaturePyramid:
        """Run the backbone on N x 3 x H x W photos.

        Raises:
            ShapeError: H or W is not divisible by 32
        """
        if photos.dim() != 4 or photos.shape[1] != 3:
            raise ShapeError("Photos must be N x 3 x H x W", {"shape": tuple(photos.shape)})
        h, w = photos.shape[-2:]
        if h % 32 or w % 32:
            raise ShapeError("Photo side must be divisible by 32", {"height": h, "width": w})

        tapped = {}
        x = photos
        for index, layer in enumerate(self.features):
            x = layer(x)
            if index in self.taps:
                tapped[index] = x
        f_lm2, f_lm1, f_l = (tapped[i] for i in self.taps)
        return FeaturePyramid(f_l=f_l, f_lm1=f_lm1, f_lm2=f_lm2)

    def init_decoder_state(self, f_g: torch.Tensor) -> DecoderState:
        return init_decoder_state(f_g, self)

    def load_backbone_weights(self, path: str) -> None:
        """Import a VGG-16 state dict with torchvision-style ``features.*`` keys.

        Raises:
            FileSystemError: the weight file does not exist
            DependencyError: the file is not a compatible VGG-16 state dict
        """
        if self.backbone_kind != "full":
            raise ConfigError("Pretrained weights are only supported for the full backbone")
        weight_path = Path(path)
        if not weight_path.exists():
            raise FileSystemError("Pretrained weight file not found", {"file_path": str(weight_path)})
        try:
            state = torch.load(weight_path, map_location="cpu")
        except Exception as e:
            raise CheckpointError("Unreadable weight file", {"file_path": str(weight_path), "cause": str(e)})
        if isinstance(state, dict) and "state_dict" in state:
            state = state["state_dict"]
        features = {
            key[len("features."):]: value
            for key, value in state.items()
            if key.startswith("features.")
        }
        try:
            self.features.load_state_dict(features, strict=True)
        except RuntimeError as e:
            raise DependencyError(
                "Weight file does not match the VGG-16 layout",
                {"file_path": str(weight_path), "dependency": "VGG-16 weights", "cause": str(e)},
            )


def encode(photos: torch.Tensor, encoder: PhotoEncoder) -> FeaturePyramid:
    return encoder.encode(photos)


def global_pool(f_l: torch.Tensor) -> torch.Tensor:
    """Per-channel spatial mean of an N x C x h x w map."""
    return f_l.mean(dim=(-2, -1))


def init_decoder_state(f_g: torch.Tensor, encoder: PhotoEncoder) -> DecoderState:
    h0 = torch.tanh(encoder.init_h(f_g))
    c0 = torch.tanh(encoder.init_c(f_g))
    return DecoderState(h0, c0)


def build_encoder(config: TrainConfig, pretrained: Optional[str] = None) -> PhotoEncoder:
    encoder = PhotoEncoder(config)
    weights = pretrained or config.pretrained_weights
    if weights:
        encoder.load_backbone_weights(weights)
    return encoder

"""Photo-to-sketch model: encoder, multi-scale attention and stroke decoder."""

from typing import Optional

import torch
import torch.nn as nn

from src.attention import MultiScaleAttention
from src.config import TrainConfig
from src.decoder import Generation, SketchDecoder, Unroll, generate, unroll_teacher_forced
from src.encoder import build_encoder, global_pool
from src.state import DecoderState, FeaturePyramid


class PhotoToSketchModel(nn.Module):
    """End-to-end model; ``teacher_forced`` drives training, ``generate`` inference."""

    def __init__(self, config: TrainConfig, pretrained: Optional[str] = None):
        super().__init__()
        self.config = config
        self.encoder = build_encoder(config, pretrained)
        self.attention = MultiScaleAttention.from_config(config, self.encoder.channels)
        self.decoder = SketchDecoder(config)

    @property
    def head(self) -> str:
        return self.decoder.head

    def encode(self, photos: torch.Tensor) -> FeaturePyramid:
        return self.encoder.encode(photos)

    def initial_state(self, pyramid: FeaturePyramid) -> DecoderState:
        return self.encoder.init_decoder_state(global_pool(pyramid.f_l))

    def teacher_forced(self, photos: torch.Tensor, points: torch.Tensor, mask: torch.Tensor) -> Unroll:
        pyramid = self.encode(photos)
        return unroll_teacher_forced(
            pyramid, points, mask, self.initial_state(pyramid), self.attention, self.decoder
        )

    def forward(self, photos: torch.Tensor, points: torch.Tensor, mask: torch.Tensor) -> Unroll:
        return self.teacher_forced(photos, points, mask)

    def generate(
        self,
        photos: torch.Tensor,
        generator: Optional[torch.Generator] = None,
        temperature: Optional[float] = None,
        T_max: Optional[int] = None,
        greedy: bool = False,
    ) -> Generation:
        pyramid = self.encode(photos)
        return generate(
            pyramid,
            self.initial_state(pyramid),
            self.attention,
            self.decoder,
            generator=generator,
            temperature=self.config.temperature if temperature is None else temperature,
            T_max=self.config.T_max if T_max is None else T_max,
            greedy=greedy,
        )

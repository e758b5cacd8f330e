"""Tensor containers passed between the encoder, attention and decoder."""

from dataclasses import dataclass
from typing import List, Tuple

import torch


@dataclass
class FeaturePyramid:
    """Encoder feature maps, each N x C x h x w.

    Attributes:
        f_l: coarsest map at 1/32 of the photo side
        f_lm1: map at 1/16
        f_lm2: finest map at 1/8
    """
    f_l: torch.Tensor
    f_lm1: torch.Tensor
    f_lm2: torch.Tensor

    def levels(self) -> List[torch.Tensor]:
        """Maps ordered coarse to fine."""
        return [self.f_l, self.f_lm1, self.f_lm2]

    @property
    def grid(self) -> Tuple[int, int]:
        """Spatial size of the attention grid (the /32 map)."""
        return tuple(self.f_l.shape[-2:])


@dataclass
class DecoderState:
    """LSTM state s_t = (h_t, c_t), each N x d_h."""
    h: torch.Tensor
    c: torch.Tensor

    def as_tuple(self) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.h, self.c

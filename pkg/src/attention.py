"""Multi-scale 2D attention.

Per step t, with decoder state s_{t-1}:

    B^k_t = W_M^k * F^k + Ws_hat s_{t-1}                  (per scale k)
    B_t   = B^l_t + down2(B^{l-1}_t) + down4(B^{l-2}_t)   (bilinear)
    J     = tanh(W_F B_t + W_B * B_t + W_s s_{t-1})
    alpha = softmax over all h*w positions of W_a^T J
    g_t   = sum_ij alpha_ij B_t,ij

The state-independent convolution terms W_M^k * F^k are computed once per
photo (``project_pyramid``) and reused at every step.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from src.config import TrainConfig
from src.errors import ConfigError, ShapeError
from src.imaging import bilinear_resize
from src.state import DecoderState, FeaturePyramid


@dataclass
class AttentionMap:
    """One step's attention weights over the h x w grid."""
    weights: np.ndarray
    step: int

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ShapeError("Attention weights must be h x w", {"shape": self.weights.shape})


def attention_maps(alphas: torch.Tensor, length: Optional[int] = None) -> List[AttentionMap]:
    """Split a T x h x w tensor into per-step AttentionMaps."""
    steps = alphas.shape[0] if length is None else int(length)
    data = alphas.detach().cpu().double().numpy()
    return [AttentionMap(data[t], t + 1) for t in range(steps)]


class MultiScaleAttention(nn.Module):
    """Attention parameters W_M (per scale), Ws_hat, W_F, W_B, W_s and W_a.

    Modes:
        "2d": full module
        "1d": no W_B neighbourhood convolution; positions are scored
              independently as an unordered set of vectors
        single scale: only F^l is used (``multi_scale=False``)
    """

    def __init__(
        self,
        channels: Sequence[int],
        hidden_size: int,
        attention_size: int,
        mode: str = "2d",
        multi_scale: bool = True,
    ):
        super().__init__()
        if mode not in ("2d", "1d"):
            raise ConfigError("Attention mode must be '2d' or '1d'", {"mode": mode})
        self.mode = mode
        self.multi_scale = multi_scale
        used = list(channels) if multi_scale else [channels[0]]
        self.scale_convs = nn.ModuleList(
            nn.Conv2d(c, attention_size, kernel_size=3, padding=1) for c in used
        )
        self.state_to_maps = nn.Linear(hidden_size, attention_size, bias=False)
        self.feature_proj = nn.Conv2d(attention_size, attention_size, kernel_size=1)
        if mode == "2d":
            self.neighbour_conv = nn.Conv2d(attention_size, attention_size, kernel_size=3, padding=1)
        else:
            self.neighbour_conv = None
        self.state_proj = nn.Linear(hidden_size, attention_size)
        self.score = nn.Linear(attention_size, 1, bias=False)

    @classmethod
    def from_config(cls, config: TrainConfig, channels: Sequence[int]) -> "MultiScaleAttention":
        return cls(
            channels,
            config.hidden_size,
            config.attention_size,
            mode="1d" if config.has("attention_1d") else "2d",
            multi_scale=not config.has("single_scale"),
        )

    def project_pyramid(self, pyramid: FeaturePyramid) -> List[torch.Tensor]:
        """State-independent terms W_M^k * F^k, coarse to fine."""
        levels = pyramid.levels() if self.multi_scale else [pyramid.f_l]
        return [conv(level) for conv, level in zip(self.scale_convs, levels)]

    def inform_projected(self, projected: List[torch.Tensor], state: DecoderState) -> List[torch.Tensor]:
        offset = self.state_to_maps(state.h)[:, :, None, None]
        return [p + offset for p in projected]

    def inform_feature_maps(self, pyramid: FeaturePyramid, state: DecoderState) -> List[torch.Tensor]:
        """B^k = W_M^k * F^k + Ws_hat s, broadcast over every position."""
        return self.inform_projected(self.project_pyramid(pyramid), state)

    def fuse(self, maps: List[torch.Tensor]) -> torch.Tensor:
        if len(maps) == 1:
            return maps[0]
        return fuse_multiscale(*maps)

    def attend(
        self, fused: torch.Tensor, state: DecoderState, return_logits: bool = False
    ) -> Tuple[torch.Tensor, ...]:
        """Spatial softmax attention over an N x d x h x w fused map.

        Returns:
            alpha: N x h x w, non-negative, unit sum per item
            g: N x d context vector
            (logits: N x h x w, only with ``return_logits``)
        """
        pre = self.feature_proj(fused) + self.state_proj(state.h)[:, :, None, None]
        if self.neighbour_conv is not None:
            pre = pre + self.neighbour_conv(fused)
        j = torch.tanh(pre)
        logits = self.score(j.permute(0, 2, 3, 1)).squeeze(-1)
        n, h, w = logits.shape
        alpha = torch.softmax(logits.reshape(n, h * w), dim=-1).reshape(n, h, w)
        g = torch.einsum("nhw,ndhw->nd", alpha, fused)
        if return_logits:
            return alpha, g, logits
        return alpha, g

    def forward(self, projected: List[torch.Tensor], state: DecoderState) -> Tuple[torch.Tensor, torch.Tensor]:
        fused = self.fuse(self.inform_projected(projected, state))
        return self.attend(fused, state)


def fuse_multiscale(b_l: torch.Tensor, b_lm1: torch.Tensor, b_lm2: torch.Tensor) -> torch.Tensor:
    """B = B^l + down2(B^{l-1}) + down4(B^{l-2}) with bilinear downscaling.

    Raises:
        ShapeError: spatial sizes are not in ratio 1:2:4
    """
    h, w = b_l.shape[-2:]
    if tuple(b_lm1.shape[-2:]) != (2 * h, 2 * w) or tuple(b_lm2.shape[-2:]) != (4 * h, 4 * w):
        raise ShapeError(
            "Pyramid maps must have spatial ratio 1:2:4",
            {"sizes": [tuple(b.shape[-2:]) for b in (b_l, b_lm1, b_lm2)]},
        )
    return b_l + bilinear_resize(b_lm1, (h, w)) + bilinear_resize(b_lm2, (h, w))


def inform_feature_maps(pyramid: FeaturePyramid, state: DecoderState, attention: MultiScaleAttention):
    return attention.inform_feature_maps(pyramid, state)


def attend(fused: torch.Tensor, state: DecoderState, attention: MultiScaleAttention):
    return attention.attend(fused, state)

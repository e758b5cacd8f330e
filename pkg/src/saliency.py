"""Saliency from attention: accumulate, normalize, upsample.

The low-resolution map for one decoded sketch is the mean of its attention
maps over the valid steps, divided by its maximum. Upsampling to photo
resolution is bilinear with the same half-pixel convention used for photo
resizing.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from src.attention import AttentionMap
from src.errors import ConfigError, EmptyAccumulation, ShapeError, UsageError
from src.imaging import bilinear_resize, save_gray_png


@dataclass
class SaliencyMap:
    """An H x W saliency map.

    Attributes:
        values: float64 array in [0, 1]; max is 1 unless degenerate
        source_steps: Number of decoding steps accumulated
        degenerate: True when the accumulated attention was all zero
    """
    values: np.ndarray
    source_steps: int
    degenerate: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeError("Saliency values must be H x W", {"shape": self.values.shape})
        if self.values.size and (self.values.min() < 0.0 or self.values.max() > 1.0):
            raise ShapeError("Saliency values must lie in [0, 1]")

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.values.shape)


def _maps_to_tensor(maps: Sequence[AttentionMap]) -> torch.Tensor:
    if not maps:
        raise EmptyAccumulation("No attention maps to accumulate")
    return torch.from_numpy(np.stack([m.weights for m in maps]))[None]


def mean_attention(alphas: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean of N x T x h x w maps over each item's valid steps.

    Raises:
        EmptyAccumulation: an item has no valid step
    """
    if alphas.dim() != 4:
        raise ShapeError("Attention stack must be N x T x h x w", {"shape": tuple(alphas.shape)})
    if mask is None:
        mask = torch.ones(alphas.shape[:2], dtype=alphas.dtype, device=alphas.device)
    mask = mask.to(alphas.dtype)
    steps = mask.sum(dim=1)
    if bool((steps == 0).any()):
        raise EmptyAccumulation("Cannot accumulate zero valid decoding steps", {"operation": "accumulate"})
    total = (alphas * mask[:, :, None, None]).sum(dim=1)
    return total / steps[:, None, None]


def accumulate(
    maps: Union[torch.Tensor, Sequence[AttentionMap]],
    mask: Optional[Union[torch.Tensor, Sequence[float]]] = None,
    return_flags: bool = False,
):
    """Max-normalized mean attention.

    Accepts either an N x T x h x w tensor (returns N x h x w, differentiable)
    or a list of AttentionMap for one sketch (returns an h x w array). An
    all-zero mean gives an all-zero map and sets the degenerate flag.
    """
    from_list = not isinstance(maps, torch.Tensor)
    alphas = _maps_to_tensor(maps) if from_list else maps
    if mask is not None and not isinstance(mask, torch.Tensor):
        mask = torch.as_tensor(np.asarray(mask, dtype=np.float64))[None]
    mean = mean_attention(alphas, mask)
    peak = mean.amax(dim=(-2, -1), keepdim=True)
    degenerate = peak <= 0
    normalized = torch.where(degenerate, torch.zeros_like(mean), mean / torch.where(degenerate, torch.ones_like(peak), peak))
    flags = degenerate.reshape(-1)

    if from_list:
        values = normalized[0].detach().numpy()
        return (values, bool(flags[0])) if return_flags else values
    return (normalized, flags) if return_flags else normalized


def accumulation_mass(alphas: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Total mass of the pre-normalization mean per item (1 for softmax attention)."""
    return mean_attention(alphas, mask).sum(dim=(-2, -1))


def mass_inside(alphas: torch.Tensor, mask: Optional[torch.Tensor], gt_masks: torch.Tensor) -> torch.Tensor:
    """Fraction of the mean attention mass falling inside each N x H x W mask."""
    mean = mean_attention(alphas, mask)
    up = bilinear_resize(mean[:, None], tuple(gt_masks.shape[-2:]))[:, 0].clamp_min(0.0)
    total = up.sum(dim=(-2, -1)).clamp_min(torch.finfo(up.dtype).tiny)
    return (up * gt_masks.to(up.dtype)).sum(dim=(-2, -1)) / total


def upsample(s_m: Union[np.ndarray, torch.Tensor], H: int, W: int, source_steps: int = 0) -> SaliencyMap:
    """Bilinear upsampling of an h x w map to H x W, clamped to [0, 1]."""
    tensor = torch.as_tensor(np.asarray(s_m, dtype=np.float64) if not isinstance(s_m, torch.Tensor) else s_m)
    tensor = tensor.detach().double()
    h, w = tensor.shape[-2:]
    if H < h or W < w:
        raise ShapeError("Cannot upsample to a smaller size", {"source": (h, w), "target": (H, W)})
    up = bilinear_resize(tensor.reshape(1, 1, h, w), (H, W))[0, 0].clamp(0.0, 1.0)
    values = up.numpy()
    return SaliencyMap(values, source_steps, degenerate=not bool(values.max() > 0))


def upsample_batch(s_m: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
    """N x h x w -> N x H x W, differentiable."""
    return bilinear_resize(s_m[:, None], size)[:, 0].clamp(0.0, 1.0)


def saliency_lowres(model, photos: torch.Tensor, points: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Teacher-forced low-resolution saliency, N x h x w, differentiable."""
    unroll = model.teacher_forced(photos, points, mask)
    return accumulate(unroll.alphas, mask)


def compute_saliency(model, photos: torch.Tensor, points: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Teacher-forced saliency at photo resolution, N x H x W, differentiable."""
    return upsample_batch(saliency_lowres(model, photos, points, mask), tuple(photos.shape[-2:]))


def decode_attention(
    photos: torch.Tensor,
    model,
    mode: str = "free_running",
    points: Optional[torch.Tensor] = None,
    mask: Optional[torch.Tensor] = None,
    T_max: Optional[int] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Attention maps and step validity for one decoding mode (no grad).

    ``free_running`` decodes greedily; ``teacher_forced`` needs the
    ground-truth ``points`` and ``mask``.

    Raises:
        UsageError: unknown mode, or teacher-forced mode without a sketch
    """
    with torch.no_grad():
        if mode == "teacher_forced":
            if points is None or mask is None:
                raise UsageError("Teacher-forced saliency requires ground-truth sketches")
            return model.teacher_forced(photos, points, mask).alphas, mask
        if mode == "free_running":
            generation = model.generate(photos, greedy=True, T_max=T_max)
            return generation.alphas, generation.mask
    raise UsageError(f"Unknown saliency mode '{mode}'", {"valid": "teacher_forced, free_running"})


def predict_saliency(
    photos: torch.Tensor,
    model,
    mode: str = "free_running",
    points: Optional[torch.Tensor] = None,
    mask: Optional[torch.Tensor] = None,
    T_max: Optional[int] = None,
) -> List[SaliencyMap]:
    """Saliency maps for N x 3 x H x W photos; deterministic in both modes.

    Raises:
        UsageError: see ``decode_attention``
        EmptyAccumulation: propagated from accumulation
    """
    alphas, valid = decode_attention(photos, model, mode, points, mask, T_max)
    with torch.no_grad():
        low, flags = accumulate(alphas, valid, return_flags=True)
        up = upsample_batch(low.double(), tuple(photos.shape[-2:]))
    steps = valid.sum(dim=1).long().tolist()
    return [
        SaliencyMap(up[i].cpu().numpy(), int(steps[i]), bool(flags[i]))
        for i in range(up.shape[0])
    ]


def save_saliency(path: Union[str, Path], saliency: SaliencyMap, float_sidecar: bool = False) -> List[str]:
    """Write the 8-bit PNG and, optionally, a lossless ``.npy`` sidecar."""
    output_path = Path(path)
    written = [save_gray_png(output_path, saliency.values)]
    if float_sidecar:
        sidecar = output_path.with_suffix(".npy")
        np.save(sidecar, saliency.values.astype(np.float32))
        written.append(str(sidecar))
    return written


def render_attention_progress(
    photo: np.ndarray,
    alphas: Union[np.ndarray, torch.Tensor],
    every: int = 10,
    colormap: str = "jet",
    blend: float = 0.5,
) -> List[Tuple[int, np.ndarray]]:
    """Cumulative attention up to step t overlaid on the photo.

    Args:
        photo: H x W x 3 array in [0, 1]
        alphas: T x h x w attention maps of the executed steps
        every: One frame per ``every`` steps; the last step always gets one

    Returns:
        (step, H x W x 3 float array in [0, 1]) pairs
    """
    if every <= 0:
        raise ConfigError("Frame interval must be positive", {"every": every})
    maps = torch.as_tensor(np.asarray(alphas, dtype=np.float64) if not isinstance(alphas, torch.Tensor) else alphas)
    maps = maps.detach().double().cpu()
    steps = maps.shape[0]
    if steps == 0:
        raise EmptyAccumulation("No attention maps to render")
    h, w = photo.shape[:2]
    cmap = plt.get_cmap(colormap)
    marks = sorted(set(range(every, steps + 1, every)) | {steps})
    frames = []
    for t in marks:
        cumulative = accumulate(maps[None, :t])[0]
        heat = upsample(cumulative, h, w).values
        colored = cmap(heat)[..., :3]
        frames.append((t, np.clip((1.0 - blend) * photo + blend * colored, 0.0, 1.0)))
    return frames

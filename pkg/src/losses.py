"""Training losses: pen-state cross-entropy, offset likelihood and equivariance.

All sequence losses are mask-aware: padded steps never contribute, and the
mean is taken over the valid steps of the whole batch (or per sample).
"""

from dataclasses import dataclass
from typing import Dict, Optional, Union

import torch
import torch.nn.functional as F

from src.config import TrainConfig
from src.decoder import GmmParams, gmm_log_density, split_output
from src.errors import UnsupportedTransform
from src.imaging import warp_image
from src.saliency import accumulate, saliency_lowres
from src.sketch_vector import AffineTransform


Number = Union[float, torch.Tensor]


@dataclass
class LossReport:
    """Weighted loss components; ``total`` is their sum."""
    coord: Number
    stroke: Number
    eqv: Number
    total: Number

    def as_dict(self) -> Dict[str, float]:
        return {
            "coord": float(self.coord),
            "stroke": float(self.stroke),
            "eqv": float(self.eqv),
            "total": float(self.total),
        }


def _masked_mean(values: torch.Tensor, mask: torch.Tensor, per_sample: bool) -> torch.Tensor:
    mask = mask.to(values.dtype)
    if per_sample:
        return (values * mask).sum(dim=-1) / mask.sum(dim=-1)
    return (values * mask).sum() / mask.sum()


def pen_state_loss(
    pen_logits: torch.Tensor, gt_pen: torch.Tensor, mask: torch.Tensor, per_sample: bool = False
) -> torch.Tensor:
    """Categorical cross-entropy of the pen state over valid steps.

    Args:
        pen_logits: N x T x 3 unnormalized scores
        gt_pen: N x T x 3 one-hot targets
        mask: N x T validity
    """
    log_probs = F.log_softmax(pen_logits, dim=-1)
    ce = -(gt_pen.to(log_probs.dtype) * log_probs).sum(dim=-1)
    return _masked_mean(ce, mask, per_sample)


def stroke_loss(
    g: GmmParams, gt_offsets: torch.Tensor, mask: torch.Tensor, per_sample: bool = False, validate: bool = True
) -> torch.Tensor:
    """Negative log-likelihood of the ground-truth offsets under the mixture.

    Raises:
        InvalidParams: mixture parameters violate their invariants
    """
    log_density = gmm_log_density(gt_offsets[..., 0], gt_offsets[..., 1], g, validate=validate)
    return _masked_mean(-log_density, mask, per_sample)


def l1_offset_loss(
    pred_offsets: torch.Tensor, gt_offsets: torch.Tensor, mask: torch.Tensor, per_sample: bool = False
) -> torch.Tensor:
    """|dx - dx_hat| + |dy - dy_hat| averaged over valid steps (l1 head)."""
    error = (pred_offsets - gt_offsets).abs().sum(dim=-1)
    return _masked_mean(error, mask, per_sample)


def transform_points(points: torch.Tensor, t: AffineTransform) -> torch.Tensor:
    """Apply the linear part of ``t`` to the offsets of N x T x 5 stroke-5 rows."""
    if t.is_identity:
        return points
    linear = torch.as_tensor(t.linear(), dtype=points.dtype, device=points.device)
    return torch.cat([points[..., :2] @ linear.T, points[..., 2:]], dim=-1)


def equivariance_loss(
    model,
    photos: torch.Tensor,
    points: torch.Tensor,
    mask: torch.Tensor,
    transform: AffineTransform,
    base_lowres: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Mean |X(A(P)) - A(X(P))| on the attention grid.

    X is teacher-forced saliency before upsampling; the transformed branch
    is fed the transformed sketch label. ``base_lowres`` may carry X(P) when
    it is already computed.

    Raises:
        UnsupportedTransform: ``transform`` is defined on another canvas or
            is not invertible on the grid
    """
    if tuple(transform.canvas) != tuple(photos.shape[-2:]):
        raise UnsupportedTransform(
            "Transform canvas does not match the photo size",
            {"canvas": transform.canvas, "photo": tuple(photos.shape[-2:])},
        )
    if base_lowres is None:
        base_lowres = saliency_lowres(model, photos, points, mask)
    transformed = saliency_lowres(model, warp_image(photos, transform), transform_points(points, transform), mask)
    target = warp_image(base_lowres[:, None], transform)[:, 0]
    return (transformed - target).abs().mean()


def total_loss(
    coord: Number, stroke: Number, eqv: Number, config: Optional[TrainConfig] = None
) -> LossReport:
    """Weight the components (unit weights by default) and sum them."""
    if config is None:
        weights = {"coord": 1.0, "stroke": 1.0, "eqv": 1.0}
    else:
        weights = {name: config.weight(name) for name in ("coord", "stroke", "eqv")}
    coord = weights["coord"] * coord
    stroke = weights["stroke"] * stroke
    eqv = weights["eqv"] * eqv
    return LossReport(coord, stroke, eqv, coord + stroke + eqv)


def truncate_batch(batch: dict) -> dict:
    """Drop trailing columns that are padding for every item."""
    length = max(int(batch["mask"].sum(dim=1).max()), 1)
    trimmed = dict(batch)
    trimmed["points"] = batch["points"][:, :length]
    trimmed["mask"] = batch["mask"][:, :length]
    return trimmed


def compute_batch_losses(
    model, batch: dict, config: TrainConfig, transform: Optional[AffineTransform] = None
) -> LossReport:
    """All three losses on one batch; ``transform`` drives the equivariance term."""
    batch = truncate_batch(batch)
    photos, points, mask = batch["photo"], batch["points"], batch["mask"]
    unroll = model.teacher_forced(photos, points, mask)

    if model.head == "l1":
        stroke = l1_offset_loss(unroll.outputs[..., :2], points[..., :2], mask)
        pen_logits = unroll.outputs[..., 2:5]
    else:
        g, pen = split_output(unroll.outputs, config.M)
        stroke = stroke_loss(g, points[..., :2], mask)
        pen_logits = pen.logits
    coord = pen_state_loss(pen_logits, points[..., 2:], mask)

    if transform is not None and config.weight("eqv") > 0:
        base = accumulate(unroll.alphas, mask)
        eqv = equivariance_loss(model, photos, points, mask, transform, base_lowres=base)
    else:
        eqv = torch.zeros((), dtype=stroke.dtype, device=stroke.device)
    return total_loss(coord, stroke, eqv, config)

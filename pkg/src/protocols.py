"""Downstream protocols: linear probing, fractional fine-tuning and ablations.

Probe and fine-tune heads predict a mask from the coarsest encoder map,
bilinearly upsampled to the photo size, through one convolution trained
with pixel-wise binary cross-entropy.
"""

import copy
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch
import torch.nn as nn
from torch.utils.data import DataLoader, Subset

from src.checkpoint import restore_model
from src.config import ABLATIONS, TrainConfig
from src.data import PairedSample, build_datasets
from src.encoder import PhotoEncoder
from src.errors import ConfigError, TrainingError
from src.imaging import bilinear_resize
from src.metrics import EvalReport, MetricConfig, evaluate_maps, write_rows_csv
from src.trainer import epoch_order, evaluate, train


ProgressCallback = Callable[[int, str, str], None]


class MaskHead(nn.Module):
    """Encoder plus a single k x k convolution on the upsampled last feature map."""

    def __init__(self, encoder: PhotoEncoder, kernel: int = 1):
        super().__init__()
        if kernel not in (1, 3):
            raise ConfigError(f"Probe kernel must be 1 or 3, got {kernel}")
        self.encoder = encoder
        self.head = nn.Conv2d(encoder.channels[0], 1, kernel_size=kernel, padding=kernel // 2)

    def forward(self, photos: torch.Tensor) -> torch.Tensor:
        f_l = self.encoder.encode(photos).f_l
        up = bilinear_resize(f_l, tuple(photos.shape[-2:]))
        return self.head(up)[:, 0]


@dataclass
class ProtocolResult:
    """Evaluation of a trained mask head.

    Attributes:
        report: Metrics on the evaluation split
        rows: Per-image metric rows
        losses: Mean BCE per epoch
        backbone_unchanged: Backbone parameters identical before and after
            training (always checked for probes)
        subset: Training indices used (fine-tuning)
    """
    report: EvalReport
    rows: List[dict]
    losses: List[float] = field(default_factory=list)
    backbone_unchanged: Optional[bool] = None
    subset: List[int] = field(default_factory=list)


def load_encoder(checkpoint: Optional[str], config: TrainConfig, seed: int = 0) -> PhotoEncoder:
    """Encoder from a trained checkpoint, or freshly initialized from ``seed``."""
    if checkpoint:
        model, _, _ = restore_model(checkpoint)
        return model.encoder
    torch.manual_seed(seed)
    return PhotoEncoder(config)


def _fit(
    model: MaskHead,
    parameters,
    dataset,
    config: TrainConfig,
    epochs: int,
    lr: float,
    seed: int,
) -> List[float]:
    optimizer = torch.optim.Adam(parameters, lr=lr)
    criterion = nn.BCEWithLogitsLoss(reduction="none")
    losses = []
    for epoch in range(epochs):
        order = epoch_order(len(dataset), seed, epoch)
        loader = DataLoader(dataset, batch_size=config.batch_size, sampler=order, num_workers=config.jobs)
        total, count = 0.0, 0
        for batch in loader:
            keep = batch["has_mask"]
            if not bool(keep.any()):
                continue
            optimizer.zero_grad()
            logits = model(batch["photo"][keep])
            loss = criterion(logits, batch["gt_mask"][keep]).mean()
            if not bool(torch.isfinite(loss)):
                raise TrainingError("Non-finite mask loss", {"operation": "protocol", "epoch": epoch})
            loss.backward()
            optimizer.step()
            total += float(loss) * int(keep.sum())
            count += int(keep.sum())
        losses.append(total / max(count, 1))
    return losses


def predict_masks(model: MaskHead, dataset, config: TrainConfig) -> Tuple[List[np.ndarray], List[np.ndarray], List[str]]:
    preds, gts, ids = [], [], []
    model.eval()
    with torch.no_grad():
        for batch in DataLoader(dataset, batch_size=config.batch_size, shuffle=False):
            probs = torch.sigmoid(model(batch["photo"]).double())
            for i in torch.nonzero(batch["has_mask"]).flatten().tolist():
                preds.append(probs[i].numpy())
                gts.append(batch["gt_mask"][i].numpy() > 0.5)
                ids.append(str(int(batch["index"][i])))
    return preds, gts, ids


def _evaluate_head(model, dataset, config, metric_config) -> Tuple[EvalReport, List[dict]]:
    preds, gts, ids = predict_masks(model, dataset, config)
    return evaluate_maps(preds, gts, metric_config or MetricConfig(), config.max_fbeta_per_image, ids)


def linear_probe(
    encoder: PhotoEncoder,
    train_set,
    eval_set,
    config: TrainConfig,
    kernel: int = 1,
    seed: int = 0,
    metric_config: Optional[MetricConfig] = None,
) -> ProtocolResult:
    """Train only a 1x1 or 3x3 head on frozen encoder features.

    Raises:
        TrainingError: a backbone parameter changed or received a gradient
    """
    encoder = copy.deepcopy(encoder)
    for p in encoder.parameters():
        p.requires_grad_(False)
    before = {k: v.clone() for k, v in encoder.state_dict().items()}

    torch.manual_seed(seed)
    model = MaskHead(encoder, kernel)
    losses = _fit(model, model.head.parameters(), train_set, config, config.probe_epochs, config.probe_lr, seed)

    if any(p.grad is not None and bool(p.grad.abs().sum() > 0) for p in encoder.parameters()):
        raise TrainingError("Frozen backbone received a gradient", {"operation": "linear_probe"})
    after = encoder.state_dict()
    unchanged = all(torch.equal(before[k], after[k]) for k in before)
    if not unchanged:
        raise TrainingError("Frozen backbone changed during probing", {"operation": "linear_probe"})

    report, rows = _evaluate_head(model, eval_set, config, metric_config)
    report.extra.update({"protocol": "linear_probe", "kernel": kernel, "seed": seed})
    return ProtocolResult(report, rows, losses, unchanged)


def fraction_subset(n: int, fraction: float, seed: int) -> List[int]:
    """Sorted random subset of ``int(fraction * n)`` indices.

    Raises:
        ConfigError: the subset would be empty
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError("Fine-tuning fraction must lie in (0, 1]", {"fraction": fraction})
    size = int(fraction * n)
    if size < 1:
        raise ConfigError(
            "Fine-tuning subset is smaller than one sample", {"fraction": fraction, "available": n}
        )
    rng = np.random.default_rng(seed)
    return sorted(int(i) for i in rng.choice(n, size=size, replace=False))


def finetune_fraction(
    encoder: PhotoEncoder,
    train_set,
    eval_set,
    config: TrainConfig,
    fraction: float,
    seed: int = 0,
    kernel: int = 1,
    metric_config: Optional[MetricConfig] = None,
) -> ProtocolResult:
    """Fine-tune the whole encoder plus a head on a seeded fraction of the labels."""
    subset = fraction_subset(len(train_set), fraction, seed)
    torch.manual_seed(seed)
    model = MaskHead(copy.deepcopy(encoder), kernel)
    for p in model.parameters():
        p.requires_grad_(True)
    losses = _fit(
        model, model.parameters(), Subset(train_set, subset), config, config.finetune_epochs, config.finetune_lr, seed
    )
    report, rows = _evaluate_head(model, eval_set, config, metric_config)
    report.extra.update({"protocol": "finetune", "fraction": fraction, "seed": seed})
    return ProtocolResult(report, rows, losses, subset=subset)


def variant_config(base: TrainConfig, variant: str, seed: int) -> TrainConfig:
    """Config for an ablation variant: "full", an ablation flag or "gmm_m<M>"."""
    if variant == "full":
        return replace(base, ablations=(), seed=seed)
    if variant in ABLATIONS:
        return replace(base, ablations=(variant,), seed=seed)
    if variant.startswith("gmm_m") and variant[5:].isdigit() and int(variant[5:]) > 0:
        return replace(base, ablations=(), M=int(variant[5:]), seed=seed)
    raise ConfigError(f"Unknown ablation variant '{variant}'", {"valid": f"full, {', '.join(ABLATIONS)}, gmm_m<M>"})


@dataclass
class AblationResult:
    rows: List[dict]
    artifacts: List[str]


def summarize_ablation(rows: Sequence[dict], metric: str = "max_fbeta") -> Dict[str, float]:
    """Median of ``metric`` over seeds per variant."""
    variants: Dict[str, List[float]] = {}
    for row in rows:
        variants.setdefault(row["variant"], []).append(row[metric])
    return {name: float(np.median(values)) for name, values in variants.items()}


def plot_ablation(path: Path, rows: Sequence[dict], metric: str = "max_fbeta") -> str:
    medians = summarize_ablation(rows, metric)
    names = list(medians)
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(names)), 4))
    ax.bar(range(len(names)), [medians[n] for n in names], color="#7aa6c2")
    for i, name in enumerate(names):
        values = [r[metric] for r in rows if r["variant"] == name]
        ax.scatter([i] * len(values), values, color="black", s=12, zorder=3)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel(metric)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return str(path)


def run_ablation_suite(
    base: TrainConfig,
    samples: Dict[str, List[PairedSample]],
    out_dir: str,
    variants: Optional[Sequence[str]] = None,
    seeds: Sequence[int] = (0, 1, 2),
    mixtures: Sequence[int] = (),
    progress_callback: Optional[ProgressCallback] = None,
) -> AblationResult:
    """Train and evaluate every variant for every seed.

    Offset scales are recomputed per variant, so ``raw_offsets`` trains on
    pixel-unit offsets. Writes ``ablation.csv``, ``ablation.json`` and
    ``ablation.png``.
    """
    names = list(variants) if variants else ["full", *ABLATIONS]
    names += [f"gmm_m{m}" for m in mixtures if f"gmm_m{m}" not in names]
    for name in names:
        variant_config(base, name, 0)

    root = Path(out_dir)
    rows = []
    mode = base.eval_modes[0]
    runs = [(name, seed) for name in names for seed in seeds]
    for number, (name, seed) in enumerate(runs, 1):
        label = f"{name} (seed {seed})"
        if progress_callback:
            progress_callback(number, label, "start")
        config = variant_config(base, name, seed)
        datasets, scale = build_datasets(samples, config)
        result = train(config, datasets["train"], str(root / name / f"seed_{seed}"), scale)
        model, _, _ = restore_model(result.checkpoint_path)
        evaluation = evaluate(model, datasets["test"], config, modes=[mode])
        report = evaluation.reports[mode]
        first, last = result.stroke_trend()
        rows.append({
            "variant": name,
            "seed": seed,
            "max_fbeta": report.max_fbeta,
            "mae": report.mae,
            "weighted_fbeta": report.weighted_fbeta,
            "s_measure": report.s_measure,
            "initial_stroke": first,
            "final_stroke": last,
        })
        if progress_callback:
            progress_callback(number, label, "complete")

    root.mkdir(parents=True, exist_ok=True)
    artifacts = [write_rows_csv(root / "ablation.csv", rows)]
    json_path = root / "ablation.json"
    json_path.write_text(
        json.dumps({"rows": rows, "median_max_fbeta": summarize_ablation(rows)}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    artifacts.append(str(json_path))
    artifacts.append(plot_ablation(root / "ablation.png", rows))
    return AblationResult(rows, artifacts)

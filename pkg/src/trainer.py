"""Training loop and evaluation.

Every source of randomness is derived from ``config.seed``: parameter
initialization from the torch generator seeded once, and per epoch both the
batch order and the equivariance transforms from ``(seed, epoch)``. Resuming
from a checkpoint therefore replays the following epochs exactly.
"""

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch.utils.data import DataLoader

from src.checkpoint import load_checkpoint, save_checkpoint
from src.config import TrainConfig
from src.data import SketchPhotoDataset, sample_affine
from src.errors import TrainingError, UsageError
from src.losses import LossReport, compute_batch_losses, truncate_batch
from src.metrics import EvalReport, MetricConfig, evaluate_maps, log_loss_correlation, sketch_log_loss
from src.model import PhotoToSketchModel
from src.saliency import accumulate, decode_attention, mass_inside, upsample_batch


ProgressCallback = Callable[[int, str, str], None]

LOG_NAME = "train_log.jsonl"


@dataclass
class TrainResult:
    """Outcome of a training run.

    Attributes:
        checkpoint_path: Last checkpoint written
        log_path: JSON-lines loss log
        epochs_run: Epochs executed by this call
        steps: Optimizer steps completed overall
        history: Logged rows of this call
        scale_factor: Offset normalization used
        warnings: Skipped sketches and similar notices
        step_timings: Seconds per epoch
        total_time: Wall-clock seconds
    """
    checkpoint_path: Optional[str]
    log_path: str
    epochs_run: int
    steps: int
    history: List[dict] = field(default_factory=list)
    scale_factor: float = 1.0
    warnings: List[str] = field(default_factory=list)
    step_timings: Dict[str, float] = field(default_factory=dict)
    total_time: float = 0.0

    def stroke_trend(self) -> Tuple[Optional[float], Optional[float]]:
        """Mean stroke loss of the first and last logged epochs."""
        if not self.history:
            return None, None
        epochs = sorted({row["epoch"] for row in self.history})

        def mean_for(epoch):
            values = [row["stroke"] for row in self.history if row["epoch"] == epoch]
            return float(np.mean(values))

        return mean_for(epochs[0]), mean_for(epochs[-1])


def set_determinism(enabled: bool) -> None:
    torch.use_deterministic_algorithms(enabled)
    torch.backends.cudnn.benchmark = not enabled
    torch.backends.cudnn.deterministic = enabled


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def epoch_order(n: int, seed: int, epoch: int) -> List[int]:
    """Batch order of one epoch, a pure function of (seed, epoch)."""
    generator = torch.Generator().manual_seed(epoch_seed(seed, epoch))
    return torch.randperm(n, generator=generator).tolist()


def make_loader(dataset, config: TrainConfig, order: Optional[Sequence[int]] = None) -> DataLoader:
    return DataLoader(
        dataset,
        batch_size=config.batch_size,
        sampler=list(order) if order is not None else None,
        shuffle=False,
        num_workers=config.jobs,
    )


def _truncate_log(log_path: Path, epochs_done: int) -> None:
    """Drop logged rows of epochs after the resumed checkpoint."""
    if not log_path.exists():
        return
    kept = [
        line for line in log_path.read_text(encoding="utf-8").splitlines()
        if line.strip() and json.loads(line)["epoch"] <= epochs_done
    ]
    log_path.write_text("".join(line + "\n" for line in kept), encoding="utf-8")


def _all_finite(model: torch.nn.Module) -> bool:
    return all(bool(torch.isfinite(p).all()) for p in model.parameters())


def _dump_batch(out_dir: Path, batch: dict, report: LossReport, epoch: int, step: int, transform) -> str:
    path = out_dir / f"nonfinite_step{step:06d}.pt"
    torch.save(
        {
            "batch": batch,
            "losses": report.as_dict(),
            "epoch": epoch,
            "step": step,
            "transform": repr(transform),
        },
        path,
    )
    return str(path)


def train(
    config: TrainConfig,
    dataset: SketchPhotoDataset,
    out_dir: str,
    scale_factor: float = 1.0,
    resume: Optional[str] = None,
    progress_callback: Optional[ProgressCallback] = None,
    verbose: bool = False,
) -> TrainResult:
    """Optimize coord + stroke + equivariance losses with Adam.

    Writes one JSON line per step and a checkpoint after every epoch
    (``epoch_XXX.pt`` and ``last.pt``).

    Args:
        config: Validated training configuration
        dataset: Training split
        out_dir: Directory for the log and checkpoints
        scale_factor: Offset normalization stored with the checkpoints
        resume: Checkpoint to continue from
        progress_callback: Called as (epoch, name, "start" | "complete")
        verbose: Print per-epoch timing lines

    Raises:
        UsageError: the dataset is empty
        TrainingError: a loss or parameter became non-finite; the offending
            batch is saved next to the log
        CheckpointError: the resume checkpoint does not match ``config``
    """
    start_time = time.time()
    if len(dataset) == 0:
        raise UsageError("Training dataset is empty", {"skipped": getattr(dataset, "skipped", 0)})

    output_dir = Path(out_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    set_determinism(config.deterministic)

    torch.manual_seed(config.seed)
    model = PhotoToSketchModel(config)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    start_epoch, step = 0, 0
    if resume:
        checkpoint = load_checkpoint(resume, config)
        model.load_state_dict(checkpoint.model_state)
        if checkpoint.optimizer_state is not None:
            optimizer.load_state_dict(checkpoint.optimizer_state)
        if checkpoint.rng_state is not None:
            torch.set_rng_state(checkpoint.rng_state)
        start_epoch, step = checkpoint.epoch, checkpoint.step
        scale_factor = checkpoint.scale_factor

    warnings = []
    if getattr(dataset, "skipped", 0):
        warnings.append(f"Skipped {dataset.skipped} sketches longer than T_max={config.T_max}")

    log_path = output_dir / LOG_NAME
    history: List[dict] = []
    step_timings: Dict[str, float] = {}
    checkpoint_path = str(resume) if resume else None
    canvas = (config.image_side, config.image_side)
    if resume:
        _truncate_log(log_path, start_epoch)

    with open(log_path, "a" if resume else "w", encoding="utf-8") as log:
        for epoch in range(start_epoch, config.epochs):
            epoch_start = time.time()
            if progress_callback:
                progress_callback(epoch + 1, f"Epoch {epoch + 1}/{config.epochs}", "start")
            rng = np.random.default_rng([config.seed, epoch])
            model.train()
            for batch in make_loader(dataset, config, epoch_order(len(dataset), config.seed, epoch)):
                transform = sample_affine(rng, config.affine, canvas) if config.weight("eqv") > 0 else None
                optimizer.zero_grad()
                report = compute_batch_losses(model, batch, config, transform)
                if not bool(torch.isfinite(report.total)):
                    dump = _dump_batch(output_dir, batch, report, epoch, step, transform)
                    raise TrainingError(
                        "Non-finite loss",
                        {"operation": "train", "epoch": epoch, "step": step, "dump": dump},
                    )
                report.total.backward()
                if config.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                optimizer.step()
                if not _all_finite(model):
                    dump = _dump_batch(output_dir, batch, report, epoch, step, transform)
                    raise TrainingError(
                        "Non-finite parameters after update",
                        {"operation": "train", "epoch": epoch, "step": step, "dump": dump},
                    )
                step += 1
                row = {"step": step, "epoch": epoch + 1, **report.as_dict()}
                history.append(row)
                log.write(json.dumps(row) + "\n")
            log.flush()

            save_checkpoint(output_dir / f"epoch_{epoch + 1:03d}.pt", model, optimizer, epoch + 1, step, config, scale_factor)
            checkpoint_path = save_checkpoint(output_dir / "last.pt", model, optimizer, epoch + 1, step, config, scale_factor)

            step_timings[f"epoch_{epoch + 1}"] = time.time() - epoch_start
            if progress_callback:
                progress_callback(epoch + 1, f"Epoch {epoch + 1}/{config.epochs}", "complete")
            if verbose:
                print(f"⏱️  Epoch {epoch + 1} completed in {step_timings[f'epoch_{epoch + 1}']:.2f}s")

    model.eval()
    return TrainResult(
        checkpoint_path=checkpoint_path,
        log_path=str(log_path),
        epochs_run=max(config.epochs - start_epoch, 0),
        steps=step,
        history=history,
        scale_factor=scale_factor,
        warnings=warnings,
        step_timings=step_timings,
        total_time=time.time() - start_time,
    )


@dataclass
class Evaluation:
    """Metrics per decoding mode.

    Attributes:
        reports: EvalReport per mode ("free_running", "teacher_forced", "oracle")
        rows: Per-image metric rows per mode
        curves: (thresholds, precision, recall) per mode
        warnings: Skipped images and similar notices
    """
    reports: Dict[str, EvalReport]
    rows: Dict[str, List[dict]]
    curves: Dict[str, Tuple[np.ndarray, np.ndarray, np.ndarray]] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {mode: report.to_dict() for mode, report in self.reports.items()}


def _collect(model, dataset, config: TrainConfig, mode: str):
    preds, gts, ids, inside, area = [], [], [], [], []
    for batch in make_loader(dataset, config):
        batch = truncate_batch(batch)
        keep = batch["has_mask"]
        if not bool(keep.any()):
            continue
        gt = batch["gt_mask"]
        if mode == "oracle":
            maps = gt.double()
        else:
            alphas, valid = decode_attention(batch["photo"], model, mode, batch["points"], batch["mask"])
            with torch.no_grad():
                maps = upsample_batch(accumulate(alphas, valid).double(), tuple(gt.shape[-2:]))
                inside.extend(mass_inside(alphas.double(), valid, gt)[keep].tolist())
        area.extend(gt.double().mean(dim=(-2, -1))[keep].tolist())
        for i in torch.nonzero(keep).flatten().tolist():
            preds.append(maps[i].cpu().numpy())
            gts.append(gt[i].numpy() > 0.5)
            ids.append(str(int(batch["index"][i])))
    return preds, gts, ids, inside, area


def evaluate(
    model: Optional[PhotoToSketchModel],
    dataset: SketchPhotoDataset,
    config: TrainConfig,
    modes: Optional[Sequence[str]] = None,
    metric_config: Optional[MetricConfig] = None,
    progress_callback: Optional[ProgressCallback] = None,
) -> Evaluation:
    """Predict saliency for every masked photo and aggregate the metrics.

    Each report also carries the mean attention mass inside the object,
    the mean object area fraction and, for mixture heads, the sketch
    log-loss with its correlation to per-image max F-beta.
    """
    metric_config = metric_config or MetricConfig()
    modes = list(modes or config.eval_modes)
    if model is not None:
        model.eval()

    log_loss, per_sample = None, None
    if model is not None and model.head == "gmm" and any(m != "oracle" for m in modes):
        log_loss, per_sample = sketch_log_loss(model, dataset, config.batch_size)

    reports, rows, curves, warnings = {}, {}, {}, []
    for number, mode in enumerate(modes, 1):
        if progress_callback:
            progress_callback(number, f"Evaluating {mode}", "start")
        preds, gts, ids, inside, area = _collect(model, dataset, config, mode)
        if not preds:
            raise UsageError("No evaluation images carry a ground-truth mask")
        report, image_rows = evaluate_maps(
            preds, gts, metric_config, per_image_fbeta=config.max_fbeta_per_image, ids=ids
        )
        if report.skipped:
            warnings.append(f"{mode}: skipped {report.skipped} images with an empty mask")
        report.extra["mode"] = mode
        report.extra["mask_area_fraction"] = float(np.mean(area))
        if inside:
            report.extra["attention_mass_inside"] = float(np.mean(inside))
        if log_loss is not None and mode != "oracle":
            by_id = dict(zip((str(i) for i in dataset.indices), per_sample))
            report.extra["sketch_log_loss"] = log_loss
            report.extra["log_loss_fbeta_correlation"] = log_loss_correlation(
                [by_id[r["id"]] for r in image_rows], [r["max_fbeta"] for r in image_rows]
            )
        thresholds = np.asarray(report.extra.pop("thresholds"))
        precision = np.array([p for _, p in report.pr_curve])
        recall = np.array([r for r, _ in report.pr_curve])
        reports[mode], rows[mode], curves[mode] = report, image_rows, (thresholds, precision, recall)
        if progress_callback:
            progress_callback(number, f"Evaluating {mode}", "complete")
    return Evaluation(reports, rows, curves, warnings)

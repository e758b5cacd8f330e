"""Command orchestration for the sketch-to-saliency tool.

Each ``cmd_*`` function performs one subcommand end to end and reports a
CommandResult instead of raising: usage and configuration problems map to
exit code 2, every other failure to exit code 1.
"""

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from src.checkpoint import restore_model
from src.config import TrainConfig
from src.data import (
    PhotoSample,
    SketchPhotoDataset,
    build_datasets,
    load_dataset_splits,
    load_manifest,
    load_samples,
    photo_tensor,
    resize_photo,
    write_synthetic_dataset,
)
from src.errors import ConfigError, SketchSaliencyError, UsageError
from src.imaging import load_png, save_png
from src.metrics import plot_pr_curves, read_pr_csv, write_pr_csv, write_report_json, write_rows_csv
from src.protocols import finetune_fraction, linear_probe, load_encoder, run_ablation_suite
from src.saliency import accumulate, decode_attention, render_attention_progress, save_saliency, upsample
from src.sketch_vector import AbsPoint, SketchRecord, offsets_to_absolute, rasterize, write_ndjson
from src.trainer import evaluate, train


@dataclass
class CommandResult:
    """Result of a command execution.

    Attributes:
        exit_code: 0 on success, 1 on runtime errors, 2 on usage errors
        artifacts: Paths written by the command
        summary: Human-readable outcome
        error: Formatted error message if the command failed
        warnings: Non-fatal notices collected while running
        step_timings: Seconds per named step
        total_time: Total execution time in seconds
    """
    exit_code: int
    artifacts: List[str] = field(default_factory=list)
    summary: str = ""
    error: Optional[str] = None
    warnings: List[str] = field(default_factory=list)
    step_timings: Dict[str, float] = field(default_factory=dict)
    total_time: float = 0.0

    @property
    def success(self) -> bool:
        return self.exit_code == 0


def prepare_out_dir(out_dir: str, force: bool = False) -> Path:
    """Create ``out_dir``; refuse a non-empty one unless ``force``."""
    path = Path(out_dir)
    if path.exists() and not path.is_dir():
        raise UsageError("Output path exists and is not a directory", {"file_path": str(path)})
    if path.exists() and any(path.iterdir()) and not force:
        raise UsageError(
            "Output directory is not empty; pass --force to overwrite",
            {"file_path": str(path)},
        )
    path.mkdir(parents=True, exist_ok=True)
    return path


def _run(name: str, body: Callable[[List[str], List[str], Dict[str, float]], str]) -> CommandResult:
    start = time.time()
    artifacts: List[str] = []
    warnings: List[str] = []
    timings: Dict[str, float] = {}
    try:
        summary = body(artifacts, warnings, timings)
        return CommandResult(0, artifacts, summary, None, warnings, timings, time.time() - start)
    except (ConfigError, UsageError) as e:
        code, message = 2, str(e)
    except SketchSaliencyError as e:
        code, message = 1, str(e)
    except Exception as e:
        code, message = 1, f"Error: Unexpected failure in {name}\n  Cause: {e}"
    return CommandResult(code, artifacts, f"{name} failed", message, warnings, timings, time.time() - start)


def _timed(timings: Dict[str, float], key: str, step: int, label: str, progress_callback, fn):
    step_start = time.time()
    if progress_callback:
        progress_callback(step, label, "start")
    value = fn()
    timings[key] = time.time() - step_start
    if progress_callback:
        progress_callback(step, label, "complete")
    return value


def _save_config(path: Path, config: TrainConfig) -> str:
    path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return str(path)


def _load_photo(path: str, side: int) -> PhotoSample:
    photo = PhotoSample(load_png(path), Path(path).stem)
    if photo.pixels.shape[:2] != (side, side):
        photo = resize_photo(photo, side)
    return photo


def _test_dataset(manifest_path: str, config: TrainConfig, scale_factor: float, split: str = "test"):
    samples = load_samples(load_manifest(manifest_path), split, config.image_side)
    return SketchPhotoDataset(samples, config.T_max, scale_factor, config.photo_normalization)


def cmd_synth(config: TrainConfig, out_dir: str, force: bool = False, progress_callback=None) -> CommandResult:
    """Write a synthetic dataset: manifest, photos, masks and NDJSON sketches."""

    def body(artifacts, warnings, timings):
        root = prepare_out_dir(out_dir, force)
        manifest_path, written = _timed(
            timings, "synthesis", 1, "Generating synthetic pairs", progress_callback,
            lambda: write_synthetic_dataset(config.synth, root),
        )
        artifacts.extend([manifest_path, str(root / "sketches.ndjson"), str(root / "photos"), str(root / "masks")])
        s = config.synth
        return f"Wrote {s.n_train}/{s.n_val}/{s.n_test} train/val/test pairs ({s.canvas}x{s.canvas})"

    return _run("synth", body)


def cmd_train(
    config: TrainConfig,
    data: str,
    out_dir: str,
    force: bool = False,
    resume: Optional[str] = None,
    progress_callback=None,
    verbose: bool = False,
) -> CommandResult:
    """Train on the manifest's train split; writes the log, checkpoints and config."""

    def body(artifacts, warnings, timings):
        root = prepare_out_dir(out_dir, force or bool(resume))
        samples = _timed(
            timings, "loading", 1, "Loading dataset", progress_callback,
            lambda: load_dataset_splits(data, config, ("train",)),
        )
        datasets, scale = build_datasets(samples, config)
        artifacts.append(_save_config(root / "config.json", config))
        result = _timed(
            timings, "training", 2, "Training", progress_callback,
            lambda: train(config, datasets["train"], str(root), scale, resume=resume, verbose=verbose),
        )
        warnings.extend(result.warnings)
        artifacts.append(result.log_path)
        artifacts.extend(str(p) for p in sorted(root.glob("epoch_*.pt")))
        if result.checkpoint_path:
            artifacts.append(result.checkpoint_path)
        first, last = result.stroke_trend()
        trend = f", stroke loss {first:.3f} -> {last:.3f}" if first is not None else ""
        return f"Trained {result.epochs_run} epochs ({result.steps} steps){trend}"

    return _run("train", body)


def cmd_generate(
    checkpoint: str,
    photos: Sequence[str],
    out_dir: str,
    temperature: Optional[float] = None,
    greedy: bool = False,
    seed: int = 0,
    every: Optional[int] = None,
    force: bool = False,
    config: Optional[TrainConfig] = None,
) -> CommandResult:
    """Sketch each photo; writes NDJSON, sketch renderings and attention-progress frames.

    Generated sketches carry no absolute position, so each drawing is
    centred on the canvas by its bounding box.
    """

    def body(artifacts, warnings, timings):
        if not photos:
            raise UsageError("No input photos given")
        root = prepare_out_dir(out_dir, force)
        model, cfg, ckpt = restore_model(checkpoint, config)
        side = cfg.image_side
        step_every = every or cfg.visualize_every
        generator = torch.Generator().manual_seed(seed)
        records = []
        for path in photos:
            photo = _load_photo(path, side)
            batch = photo_tensor(photo, cfg.photo_normalization)[None]
            with torch.no_grad():
                result = model.generate(batch, generator=generator, temperature=temperature, greedy=greedy)
            length = int(result.lengths[0])
            sequence = result.sequences(ckpt.scale_factor, (side, side))[0]
            points = offsets_to_absolute(sequence)
            xs = np.array([p.x for p in points])
            ys = np.array([p.y for p in points])
            dx = (side - 1) / 2.0 - (xs.min() + xs.max()) / 2.0
            dy = (side - 1) / 2.0 - (ys.min() + ys.max()) / 2.0
            points = [AbsPoint(p.x + dx, p.y + dy, p.b) for p in points]
            records.append(SketchRecord((side, side), points))
            if len(points) < 2:
                warnings.append(f"{photo.id}: sketch ended immediately")
            raster = rasterize(points, (side, side), cfg.synth.line_width)
            if raster.clamped:
                warnings.append(f"{photo.id}: sketch left the canvas and was clamped")
            artifacts.append(save_png(root / f"{photo.id}_sketch.png", 1.0 - np.repeat(raster.pixels[..., None], 3, axis=2)))
            frames = render_attention_progress(photo.pixels, result.alphas[0, :length], step_every)
            for t, frame in frames:
                artifacts.append(save_png(root / f"{photo.id}_attention_{t:03d}.png", frame))
        ndjson = root / "sketches.ndjson"
        write_ndjson(ndjson, records)
        artifacts.insert(0, str(ndjson))
        return f"Generated {len(records)} sketches"

    return _run("generate", body)


def cmd_saliency(
    checkpoint: str,
    photos: Sequence[str],
    out_dir: str,
    mode: str = "free_running",
    float_sidecar: bool = False,
    data: Optional[str] = None,
    split: str = "test",
    force: bool = False,
    config: Optional[TrainConfig] = None,
) -> CommandResult:
    """Write one saliency PNG per photo, at the photo's own resolution.

    Teacher-forced mode needs ground-truth sketches and so reads the
    photos of a manifest split (``data``) instead of loose files.
    """

    def body(artifacts, warnings, timings):
        root = prepare_out_dir(out_dir, force)
        model, cfg, ckpt = restore_model(checkpoint, config)
        side = cfg.image_side
        if mode == "teacher_forced":
            if not data:
                raise UsageError("Teacher-forced saliency needs --data with ground-truth sketches")
            manifest = load_manifest(data)
            dataset = _test_dataset(data, cfg, ckpt.scale_factor, split)
            entries = manifest.split(split)
            for i in range(len(dataset)):
                item = dataset[i]
                entry = entries[dataset.indices[i]]
                h, w = load_png(manifest.photo_path(entry)).shape[:2]
                alphas, valid = decode_attention(
                    item["photo"][None], model, mode, item["points"][None], item["mask"][None]
                )
                smap = upsample(accumulate(alphas, valid)[0], h, w, int(valid.sum()))
                artifacts.extend(save_saliency(root / f"{Path(entry.photo).stem}.png", smap, float_sidecar))
            if dataset.skipped:
                warnings.append(f"Skipped {dataset.skipped} photos whose sketch exceeds T_max")
            return f"Wrote {len(dataset)} saliency maps ({mode})"

        if not photos:
            raise UsageError("No input photos given")
        for path in photos:
            original = load_png(path)
            photo = _load_photo(path, side)
            batch = photo_tensor(photo, cfg.photo_normalization)[None]
            alphas, valid = decode_attention(batch, model, mode)
            h, w = original.shape[:2]
            smap = upsample(accumulate(alphas, valid)[0], h, w, int(valid.sum()))
            if smap.degenerate:
                warnings.append(f"{photo.id}: degenerate (all-zero) saliency")
            artifacts.extend(save_saliency(root / f"{photo.id}.png", smap, float_sidecar))
        return f"Wrote {len(photos)} saliency maps ({mode})"

    return _run("saliency", body)


def write_evaluation(root: Path, evaluation, prefix: str = "") -> List[str]:
    written = [write_report_json(root / f"{prefix}eval_report.json", evaluation.to_dict())]
    for mode, rows in evaluation.rows.items():
        written.append(write_rows_csv(root / f"{prefix}per_image_{mode}.csv", rows))
        thresholds, precision, recall = evaluation.curves[mode]
        written.append(write_pr_csv(root / f"{prefix}pr_{mode}.csv", thresholds, precision, recall))
    curves = {mode: (c[2], c[1]) for mode, c in evaluation.curves.items()}
    written.append(plot_pr_curves(root / f"{prefix}pr_curve.png", curves))
    return written


def cmd_eval(
    checkpoint: Optional[str],
    data: str,
    out_dir: str,
    oracle: bool = False,
    split: str = "test",
    force: bool = False,
    config: Optional[TrainConfig] = None,
    progress_callback=None,
) -> CommandResult:
    """Evaluate saliency on a manifest split in every configured mode.

    ``oracle`` adds a mode that feeds the ground-truth masks as predictions;
    without a checkpoint only that mode runs.
    """

    def body(artifacts, warnings, timings):
        root = prepare_out_dir(out_dir, force)
        if checkpoint:
            model, cfg, ckpt = restore_model(checkpoint, config)
            modes = list(cfg.eval_modes) + (["oracle"] if oracle else [])
            scale = ckpt.scale_factor
        elif oracle:
            model, cfg, scale, modes = None, config or TrainConfig(), 1.0, ["oracle"]
        else:
            raise UsageError("Evaluation needs --checkpoint (or --oracle)")
        dataset = _test_dataset(data, cfg, scale, split)
        if dataset.skipped:
            warnings.append(f"Skipped {dataset.skipped} photos whose sketch exceeds T_max")
        evaluation = _timed(
            timings, "evaluation", 1, "Evaluating", progress_callback,
            lambda: evaluate(model, dataset, cfg, modes, progress_callback=None),
        )
        warnings.extend(evaluation.warnings)
        artifacts.extend(write_evaluation(root, evaluation))
        scores = ", ".join(
            f"{mode}: maxF {r.max_fbeta:.3f} MAE {r.mae:.3f}" for mode, r in evaluation.reports.items()
        )
        return f"Evaluated {len(dataset)} photos ({scores})"

    return _run("eval", body)


def _protocol_data(data: str, config: TrainConfig):
    samples = load_dataset_splits(data, config, ("train", "test"))
    datasets, _ = build_datasets(samples, config)
    return datasets["train"], datasets["test"]


def _write_protocol(root: Path, name: str, result) -> List[str]:
    payload = result.report.to_dict()
    payload["losses"] = result.losses
    if result.backbone_unchanged is not None:
        payload["backbone_unchanged"] = result.backbone_unchanged
    if result.subset:
        payload["subset_size"] = len(result.subset)
    return [
        write_report_json(root / f"{name}_report.json", payload),
        write_rows_csv(root / f"{name}_per_image.csv", result.rows),
    ]


def cmd_probe(
    checkpoint: Optional[str],
    data: str,
    out_dir: str,
    config: TrainConfig,
    kernel: int = 1,
    seed: int = 0,
    force: bool = False,
) -> CommandResult:
    """Linear probe of frozen encoder features; random init without a checkpoint."""

    def body(artifacts, warnings, timings):
        root = prepare_out_dir(out_dir, force)
        cfg = restore_model(checkpoint, None)[1] if checkpoint else config
        cfg = _protocol_config(cfg, config)
        encoder = load_encoder(checkpoint, cfg, seed)
        train_set, test_set = _protocol_data(data, cfg)
        result = linear_probe(encoder, train_set, test_set, cfg, kernel, seed)
        artifacts.extend(_write_protocol(root, f"probe_k{kernel}", result))
        return f"Probe {kernel}x{kernel}: maxF {result.report.max_fbeta:.3f}, MAE {result.report.mae:.3f}"

    return _run("probe", body)


def cmd_finetune(
    checkpoint: Optional[str],
    data: str,
    out_dir: str,
    config: TrainConfig,
    fraction: float = 0.1,
    seed: int = 0,
    kernel: int = 1,
    force: bool = False,
) -> CommandResult:
    """Fine-tune encoder plus head on a labelled fraction of the train split."""

    def body(artifacts, warnings, timings):
        root = prepare_out_dir(out_dir, force)
        cfg = restore_model(checkpoint, None)[1] if checkpoint else config
        cfg = _protocol_config(cfg, config)
        encoder = load_encoder(checkpoint, cfg, seed)
        train_set, test_set = _protocol_data(data, cfg)
        result = finetune_fraction(encoder, train_set, test_set, cfg, fraction, seed, kernel)
        artifacts.extend(_write_protocol(root, f"finetune_{fraction:g}", result))
        return (
            f"Fine-tuned on {len(result.subset)} samples: "
            f"maxF {result.report.max_fbeta:.3f}, MAE {result.report.mae:.3f}"
        )

    return _run("finetune", body)


def _protocol_config(stored: TrainConfig, requested: TrainConfig) -> TrainConfig:
    """Stored model structure with the requested protocol schedule."""
    return replace(
        stored,
        probe_epochs=requested.probe_epochs,
        probe_lr=requested.probe_lr,
        finetune_epochs=requested.finetune_epochs,
        finetune_lr=requested.finetune_lr,
        batch_size=requested.batch_size,
        jobs=requested.jobs,
        max_fbeta_per_image=requested.max_fbeta_per_image,
        pretrained_weights=None,
    )


def cmd_ablate(
    config: TrainConfig,
    data: str,
    out_dir: str,
    variants: Optional[Sequence[str]] = None,
    seeds: Sequence[int] = (0, 1, 2),
    mixtures: Sequence[int] = (),
    force: bool = False,
    progress_callback=None,
) -> CommandResult:
    """Train and evaluate every ablation variant over the seeds."""

    def body(artifacts, warnings, timings):
        root = prepare_out_dir(out_dir, force)
        samples = load_dataset_splits(data, config, ("train", "test"))
        result = _timed(
            timings, "ablation", 1, "Running ablations", None,
            lambda: run_ablation_suite(config, samples, str(root), variants, seeds, mixtures, progress_callback),
        )
        artifacts.extend(result.artifacts)
        return f"Ran {len(result.rows)} ablation runs"

    return _run("ablate", body)


def cmd_plot_pr(curves: Sequence[str], out_path: str, force: bool = False) -> CommandResult:
    """Overlay PR curves from CSV files (threshold, precision, recall) in one plot."""

    def body(artifacts, warnings, timings):
        if not curves:
            raise UsageError("No PR-curve CSV files given")
        target = Path(out_path)
        if target.exists() and not force:
            raise UsageError("Output file exists; pass --force to overwrite", {"file_path": str(target)})
        loaded = {}
        for path in curves:
            if not Path(path).exists():
                raise UsageError("PR-curve file not found", {"file_path": path})
            _, precision, recall = read_pr_csv(path)
            loaded[Path(path).stem] = (recall, precision)
        artifacts.append(plot_pr_curves(target, loaded))
        return f"Plotted {len(loaded)} PR curves"

    return _run("plot-pr", body)

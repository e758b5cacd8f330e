"""Saliency evaluation: MAE, max F-beta, weighted F-beta, S-measure and PR curves.

Binarization uses ``pred >= threshold`` over the grid k / (n - 1). When a
threshold predicts no positive pixel, precision is 0 (and so is F-beta).
Dataset-level max F-beta averages precision and recall per threshold over
images before taking the maximum.
"""

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch
from scipy import ndimage, stats
from torch.utils.data import DataLoader

from src.decoder import split_output
from src.errors import ConfigError, ShapeError, UndefinedMetric
from src.losses import stroke_loss, truncate_batch
from src.saliency import SaliencyMap


EPS = np.finfo(np.float64).eps

ArrayLike = Union[np.ndarray, SaliencyMap]


@dataclass
class MetricConfig:
    """Metric constants.

    Attributes:
        beta_sq: Precision weight in F-beta
        s_alpha: Object/region balance in the S-measure
        thresholds: Size of the binarization grid
    """
    beta_sq: float = 0.3
    s_alpha: float = 0.5
    thresholds: int = 256

    def __post_init__(self):
        errors = []
        if not self.beta_sq > 0:
            errors.append("beta_sq must be positive")
        if not 0.0 <= self.s_alpha <= 1.0:
            errors.append("s_alpha must lie in [0, 1]")
        if self.thresholds < 2:
            errors.append("thresholds must be at least 2")
        if errors:
            raise ConfigError("Invalid metric configuration: " + "; ".join(errors))

    def grid(self) -> np.ndarray:
        return np.arange(self.thresholds, dtype=np.float64) / (self.thresholds - 1)


@dataclass
class EvalReport:
    mae: float
    max_fbeta: float
    weighted_fbeta: float
    s_measure: float
    pr_curve: List[Tuple[float, float]]
    best_threshold: float = 0.0
    n_images: int = 0
    skipped: int = 0
    extra: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["pr_curve"] = [[r, p] for r, p in self.pr_curve]
        return data


def _values(pred: ArrayLike) -> np.ndarray:
    if isinstance(pred, SaliencyMap):
        return pred.values
    return np.asarray(pred, dtype=np.float64)


def _pair(pred: ArrayLike, gt: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    values = _values(pred)
    mask = np.asarray(gt).astype(bool)
    if values.shape != mask.shape:
        raise ShapeError("Prediction and ground truth differ in shape", {"pred": values.shape, "gt": mask.shape})
    return values, mask


def _require_foreground(mask: np.ndarray, metric: str) -> None:
    if not mask.any():
        raise UndefinedMetric(f"{metric} is undefined for an all-zero ground truth")


def mae(pred: ArrayLike, gt: np.ndarray) -> float:
    values, mask = _pair(pred, gt)
    return float(np.mean(np.abs(values - mask)))


def precision_recall(pred: ArrayLike, gt: np.ndarray, config: Optional[MetricConfig] = None):
    """Precision and recall at every grid threshold.

    Returns:
        (thresholds, precision, recall) arrays, ascending thresholds
    """
    config = config or MetricConfig()
    values, mask = _pair(pred, gt)
    _require_foreground(mask, "Precision-recall")
    thresholds = config.grid()
    positives = np.sort(values[mask])
    everything = np.sort(values.ravel())
    tp = positives.size - np.searchsorted(positives, thresholds, side="left")
    predicted = everything.size - np.searchsorted(everything, thresholds, side="left")
    precision = np.divide(tp, predicted, out=np.zeros_like(thresholds), where=predicted > 0)
    recall = tp / positives.size
    return thresholds, precision, recall


def fbeta(precision: np.ndarray, recall: np.ndarray, beta_sq: float) -> np.ndarray:
    precision = np.asarray(precision, dtype=np.float64)
    recall = np.asarray(recall, dtype=np.float64)
    denom = beta_sq * precision + recall
    return np.divide(
        (1.0 + beta_sq) * precision * recall, denom, out=np.zeros_like(denom), where=denom > 0
    )


def max_fbeta(pred: ArrayLike, gt: np.ndarray, config: Optional[MetricConfig] = None) -> Tuple[float, float]:
    """Best F-beta over the threshold grid and the first threshold reaching it.

    Raises:
        UndefinedMetric: ground truth has no positive pixel
    """
    config = config or MetricConfig()
    thresholds, precision, recall = precision_recall(pred, gt, config)
    scores = fbeta(precision, recall, config.beta_sq)
    best = int(np.argmax(scores))
    return float(scores[best]), float(thresholds[best])


def pr_curve(pred: ArrayLike, gt: np.ndarray, config: Optional[MetricConfig] = None) -> List[Tuple[float, float]]:
    """(recall, precision) per grid threshold, ascending thresholds."""
    _, precision, recall = precision_recall(pred, gt, config)
    return [(float(r), float(p)) for r, p in zip(recall, precision)]


def _gaussian_kernel(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    half = size // 2
    y, x = np.mgrid[-half:half + 1, -half:half + 1]
    kernel = np.exp(-(x ** 2 + y ** 2) / (2.0 * sigma ** 2))
    return kernel / kernel.sum()


def weighted_fbeta(pred: ArrayLike, gt: np.ndarray, config: Optional[MetricConfig] = None) -> float:
    """Weighted F-beta with Gaussian dependency and distance-based importance.

    Errors outside the object take the error of the nearest object pixel
    before a 7x7 (sigma 5) Gaussian smoothing; inside the object each error
    is replaced by its smoothed value when smaller. Background errors are
    weighted by 2 - exp(ln(0.5) / 5 * d), d the distance to the object.

    Raises:
        UndefinedMetric: ground truth has no positive pixel
    """
    config = config or MetricConfig()
    values, mask = _pair(pred, gt)
    _require_foreground(mask, "Weighted F-beta")
    error = np.abs(values - mask)
    distance, indices = ndimage.distance_transform_edt(~mask, return_indices=True)

    spread = error.copy()
    outside = ~mask
    spread[outside] = error[indices[0][outside], indices[1][outside]]
    smoothed = ndimage.correlate(spread, _gaussian_kernel(), mode="constant", cval=0.0)

    dependent = error.copy()
    lower = mask & (smoothed < error)
    dependent[lower] = smoothed[lower]

    importance = np.ones_like(error)
    importance[outside] = 2.0 - np.exp(np.log(0.5) / 5.0 * distance[outside])
    weighted = dependent * importance

    tp = mask.sum() - weighted[mask].sum()
    fp = weighted[outside].sum()
    recall = 1.0 - weighted[mask].mean()
    precision = tp / (EPS + tp + fp)
    beta_sq = config.beta_sq
    score = (1.0 + beta_sq) * recall * precision / (EPS + recall + beta_sq * precision)
    return float(np.clip(score, 0.0, 1.0))


def _object_score(values: np.ndarray) -> float:
    if values.size == 0:
        return 0.0
    x = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return float(2.0 * x / (x ** 2 + 1.0 + sigma + EPS))


def _s_object(values: np.ndarray, mask: np.ndarray) -> float:
    foreground = _object_score(values[mask])
    background = _object_score(1.0 - values[~mask])
    u = mask.mean()
    return float(u * foreground + (1.0 - u) * background)


def _ssim(values: np.ndarray, mask: np.ndarray) -> float:
    n = values.size
    if n == 0:
        return 0.0
    target = mask.astype(np.float64)
    x, y = values.mean(), target.mean()
    sigma_x = ((values - x) ** 2).sum() / (n - 1 + EPS)
    sigma_y = ((target - y) ** 2).sum() / (n - 1 + EPS)
    sigma_xy = ((values - x) * (target - y)).sum() / (n - 1 + EPS)
    alpha = 4.0 * x * y * sigma_xy
    beta = (x ** 2 + y ** 2) * (sigma_x + sigma_y)
    if alpha != 0:
        return float(alpha / (beta + EPS))
    if beta == 0:
        return 1.0
    return 0.0


def _s_region(values: np.ndarray, mask: np.ndarray) -> float:
    rows, cols = mask.shape
    total = mask.sum()
    # 1-based centroid, rounded half up
    col_index = np.arange(1, cols + 1)
    row_index = np.arange(1, rows + 1)
    cx = int(np.floor((mask.sum(axis=0) * col_index).sum() / total + 0.5))
    cy = int(np.floor((mask.sum(axis=1) * row_index).sum() / total + 0.5))
    area = rows * cols
    w1 = cx * cy / area
    w2 = (cols - cx) * cy / area
    w3 = cx * (rows - cy) / area
    w4 = 1.0 - w1 - w2 - w3
    quadrants = [
        (slice(0, cy), slice(0, cx), w1),
        (slice(0, cy), slice(cx, cols), w2),
        (slice(cy, rows), slice(0, cx), w3),
        (slice(cy, rows), slice(cx, cols), w4),
    ]
    return float(sum(w * _ssim(values[r, c], mask[r, c]) for r, c, w in quadrants))


def s_measure(pred: ArrayLike, gt: np.ndarray, config: Optional[MetricConfig] = None) -> float:
    """Structure measure alpha * S_object + (1 - alpha) * S_region, in [0, 1].

    An all-background ground truth scores 1 - mean(pred); an all-foreground
    one scores mean(pred).
    """
    config = config or MetricConfig()
    values, mask = _pair(pred, gt)
    y = mask.mean()
    if y == 0:
        return float(1.0 - values.mean())
    if y == 1:
        return float(values.mean())
    alpha = config.s_alpha
    score = alpha * _s_object(values, mask) + (1.0 - alpha) * _s_region(values, mask)
    return float(np.clip(score, 0.0, 1.0))


def dataset_pr(
    preds: Sequence[ArrayLike], gts: Sequence[np.ndarray], config: Optional[MetricConfig] = None
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """Mean precision and recall per threshold over images with a foreground.

    Returns:
        (thresholds, precision, recall, skipped image count)
    """
    config = config or MetricConfig()
    precisions, recalls = [], []
    skipped = 0
    for pred, gt in zip(preds, gts):
        if not np.asarray(gt).astype(bool).any():
            skipped += 1
            continue
        _, p, r = precision_recall(pred, gt, config)
        precisions.append(p)
        recalls.append(r)
    if not precisions:
        raise UndefinedMetric("Every ground truth is empty", {"skipped": skipped})
    return config.grid(), np.mean(precisions, axis=0), np.mean(recalls, axis=0), skipped


def evaluate_maps(
    preds: Sequence[ArrayLike],
    gts: Sequence[np.ndarray],
    config: Optional[MetricConfig] = None,
    per_image_fbeta: bool = False,
    ids: Optional[Sequence[str]] = None,
) -> Tuple[EvalReport, List[dict]]:
    """Aggregate all metrics over a set of maps.

    Returns:
        (EvalReport, per-image rows); undefined per-image values are None
    """
    config = config or MetricConfig()
    if len(preds) != len(gts):
        raise ShapeError("Prediction and ground-truth counts differ", {"pred": len(preds), "gt": len(gts)})
    ids = list(ids) if ids is not None else [str(i) for i in range(len(preds))]

    rows = []
    for name, pred, gt in zip(ids, preds, gts):
        row = {"id": name, "mae": mae(pred, gt), "s_measure": s_measure(pred, gt, config)}
        if np.asarray(gt).astype(bool).any():
            row["max_fbeta"], row["threshold"] = max_fbeta(pred, gt, config)
            row["weighted_fbeta"] = weighted_fbeta(pred, gt, config)
        else:
            row["max_fbeta"] = row["threshold"] = row["weighted_fbeta"] = None
        rows.append(row)

    thresholds, precision, recall, skipped = dataset_pr(preds, gts, config)
    scores = fbeta(precision, recall, config.beta_sq)
    best = int(np.argmax(scores))
    defined = [r for r in rows if r["max_fbeta"] is not None]
    if per_image_fbeta:
        best_score = float(np.mean([r["max_fbeta"] for r in defined]))
    else:
        best_score = float(scores[best])

    report = EvalReport(
        mae=float(np.mean([r["mae"] for r in rows])),
        max_fbeta=best_score,
        weighted_fbeta=float(np.mean([r["weighted_fbeta"] for r in defined])),
        s_measure=float(np.mean([r["s_measure"] for r in rows])),
        pr_curve=[(float(r), float(p)) for r, p in zip(recall, precision)],
        best_threshold=float(thresholds[best]),
        n_images=len(rows),
        skipped=skipped,
    )
    report.extra["thresholds"] = thresholds.tolist()
    return report, rows


def sketch_log_loss(model, dataset, batch_size: int = 16) -> Tuple[float, List[float]]:
    """Mean teacher-forced offset NLL in nats, plus the per-sample values.

    Raises:
        UndefinedMetric: the model has no mixture head
    """
    if model.head != "gmm":
        raise UndefinedMetric("Sketch log-loss needs a mixture head", {"head": model.head})
    losses: List[float] = []
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False)
    with torch.no_grad():
        for batch in loader:
            batch = truncate_batch(batch)
            unroll = model.teacher_forced(batch["photo"], batch["points"], batch["mask"])
            g, _ = split_output(unroll.outputs, model.decoder.M)
            per_sample = stroke_loss(g, batch["points"][..., :2], batch["mask"], per_sample=True)
            losses.extend(float(v) for v in per_sample)
    if not losses:
        raise UndefinedMetric("Sketch log-loss over an empty dataset")
    return float(np.mean(losses)), losses


def log_loss_correlation(log_losses: Sequence[float], scores: Sequence[Optional[float]]) -> Optional[float]:
    """Pearson r between per-sample log-loss and saliency score; None if undefined."""
    pairs = [(a, b) for a, b in zip(log_losses, scores) if b is not None]
    if len(pairs) < 2:
        return None
    a, b = (np.asarray(v, dtype=np.float64) for v in zip(*pairs))
    if a.std() == 0 or b.std() == 0:
        return None
    return float(stats.pearsonr(a, b)[0])


def write_report_json(path: Union[str, Path], data: dict) -> str:
    output_path = Path(path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    output_path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return str(output_path)


def write_pr_csv(path: Union[str, Path], thresholds, precision, recall) -> str:
    output_path = Path(path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    with open(output_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["threshold", "precision", "recall"])
        for t, p, r in zip(thresholds, precision, recall):
            writer.writerow([f"{t:.6f}", f"{p:.6f}", f"{r:.6f}"])
    return str(output_path)


def read_pr_csv(path: Union[str, Path]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path, "r", newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    columns = [np.array([float(r[k]) for r in rows]) for k in ("threshold", "precision", "recall")]
    return columns[0], columns[1], columns[2]


def write_rows_csv(path: Union[str, Path], rows: Sequence[dict]) -> str:
    output_path = Path(path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    names = list(rows[0].keys()) if rows else []
    with open(output_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=names)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: "" if v is None else v for k, v in row.items()})
    return str(output_path)


def plot_pr_curves(path: Union[str, Path], curves: Dict[str, Tuple[Sequence[float], Sequence[float]]]) -> str:
    """Render labelled (recall, precision) curves to an image file."""
    output_path = Path(path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 5))
    for label, (recall, precision) in curves.items():
        ax.plot(recall, precision, label=label)
    ax.set_xlabel("Recall")
    ax.set_ylabel("Precision")
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.05)
    ax.grid(True, alpha=0.3)
    if curves:
        ax.legend(loc="lower left")
    fig.tight_layout()
    fig.savefig(output_path, dpi=100)
    plt.close(fig)
    return str(output_path)

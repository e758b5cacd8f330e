"""Paired photo/sketch data: manifests, synthetic generation and batching.

Manifest format (JSON)::

    {"photos_dir": "photos", "sketches_ndjson": "sketches.ndjson",
     "masks_dir": "masks", "seed": 0,
     "entries": [{"photo": "train_0000.png", "sketch_idx": 0,
                  "split": "train", "mask": "train_0000.png"}, ...]}

Paths are relative to the manifest's directory; ``masks_dir`` and the
per-entry ``mask`` are optional.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image, ImageDraw
from torch.utils.data import Dataset

from src.config import AffineConfig, SynthConfig, TrainConfig
from src.errors import ConfigError, ManifestError, ShapeError
from src.imaging import load_mask_png, load_png, resize_array, resize_mask, save_mask_png, save_png
from src.sketch_vector import (
    AbsPoint,
    AffineTransform,
    SketchRecord,
    SketchSequence,
    absolute_to_offsets,
    compute_offset_scale,
    offsets_to_absolute,
    pad_and_mask,
    rdp_simplify,
    read_ndjson,
    write_ndjson,
)


SPLITS = ("train", "val", "test")

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class PhotoSample:
    """An H x W x 3 photo with values in [0, 1]."""
    pixels: np.ndarray
    id: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ShapeError("Photo pixels must be H x W x 3", {"shape": tuple(self.pixels.shape), "photo": self.id})
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ShapeError("Photo pixels must lie in [0, 1]", {"photo": self.id})

    @property
    def side(self) -> int:
        return int(self.pixels.shape[0])


@dataclass
class PairedSample:
    """A photo, its stroke-5 sketch and (synthetic data only) a GT mask."""
    photo: PhotoSample
    sketch: SketchSequence
    gt_mask: Optional[np.ndarray] = None

    @property
    def id(self) -> str:
        return self.photo.id


@dataclass
class ManifestEntry:
    photo: str
    sketch_idx: int
    split: str
    mask: Optional[str] = None


@dataclass
class DatasetManifest:
    """Resolved manifest; ``root`` is the directory the paths are relative to."""
    root: Path
    photos_dir: str
    sketches_ndjson: str
    entries: List[ManifestEntry]
    masks_dir: Optional[str] = None
    seed: int = 0

    def photo_path(self, entry: ManifestEntry) -> Path:
        return self.root / self.photos_dir / entry.photo

    def mask_path(self, entry: ManifestEntry) -> Optional[Path]:
        if entry.mask is None:
            return None
        return self.root / (self.masks_dir or "") / entry.mask

    @property
    def sketches_path(self) -> Path:
        return self.root / self.sketches_ndjson

    def split(self, name: str) -> List[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def to_dict(self) -> dict:
        data = {
            "photos_dir": self.photos_dir,
            "sketches_ndjson": self.sketches_ndjson,
            "seed": self.seed,
            "entries": [],
        }
        if self.masks_dir is not None:
            data["masks_dir"] = self.masks_dir
        for e in self.entries:
            item = {"photo": e.photo, "sketch_idx": e.sketch_idx, "split": e.split}
            if e.mask is not None:
                item["mask"] = e.mask
            data["entries"].append(item)
        return data


def write_manifest(manifest: DatasetManifest, path: Union[str, Path]) -> str:
    output_path = Path(path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    output_path.write_text(json.dumps(manifest.to_dict(), indent=2) + "\n", encoding="utf-8")
    return str(output_path)


def load_manifest(path: Union[str, Path]) -> DatasetManifest:
    """Parse a manifest and verify every referenced file exists.

    Entries keep their file order.

    Raises:
        ManifestError: the manifest or a referenced file is missing, or the
            content is malformed
    """
    manifest_path = Path(path)
    if not manifest_path.exists():
        raise ManifestError("Manifest not found", {"file_path": str(manifest_path)})
    try:
        data = json.loads(manifest_path.read_text(encoding="utf-8"))
        entries = [
            ManifestEntry(
                photo=str(item["photo"]),
                sketch_idx=int(item["sketch_idx"]),
                split=str(item["split"]),
                mask=item.get("mask"),
            )
            for item in data["entries"]
        ]
        manifest = DatasetManifest(
            root=manifest_path.parent,
            photos_dir=str(data["photos_dir"]),
            sketches_ndjson=str(data["sketches_ndjson"]),
            entries=entries,
            masks_dir=data.get("masks_dir"),
            seed=int(data.get("seed", 0)),
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise ManifestError("Malformed manifest", {"file_path": str(manifest_path), "cause": str(e)})

    if not manifest.sketches_path.exists():
        raise ManifestError(
            "Manifest references a missing sketch file",
            {"file_path": str(manifest_path), "missing": str(manifest.sketches_path)},
        )
    with open(manifest.sketches_path, "r", encoding="utf-8") as f:
        n_records = sum(1 for line in f if line.strip())

    seen = set()
    for entry in entries:
        if entry.split not in SPLITS:
            raise ManifestError(
                f"Unknown split '{entry.split}'", {"file_path": str(manifest_path), "photo": entry.photo}
            )
        if entry.photo in seen:
            raise ManifestError(
                "Photo listed more than once; splits must be disjoint",
                {"file_path": str(manifest_path), "photo": entry.photo},
            )
        seen.add(entry.photo)
        photo = manifest.photo_path(entry)
        if not photo.exists():
            raise ManifestError(
                "Manifest references a missing photo",
                {"file_path": str(manifest_path), "missing": str(photo)},
            )
        mask = manifest.mask_path(entry)
        if mask is not None and not mask.exists():
            raise ManifestError(
                "Manifest references a missing mask",
                {"file_path": str(manifest_path), "missing": str(mask)},
            )
        if not 0 <= entry.sketch_idx < n_records:
            raise ManifestError(
                "Sketch index out of range",
                {"file_path": str(manifest_path), "photo": entry.photo, "sketch_idx": entry.sketch_idx},
            )
    return manifest


def _rescale_points(points: Sequence[AbsPoint], canvas: Tuple[int, int], side: int) -> List[AbsPoint]:
    h, w = canvas
    sx, sy = side / w, side / h
    return [AbsPoint((x + 0.5) * sx - 0.5, (y + 0.5) * sy - 0.5, b) for x, y, b in points]


def load_samples(manifest: DatasetManifest, split: str, side: int) -> List[PairedSample]:
    """Read one split, resizing photos, masks and sketches to ``side``."""
    records = read_ndjson(manifest.sketches_path)
    samples = []
    for entry in manifest.split(split):
        record = records[entry.sketch_idx]
        photo = PhotoSample(load_png(manifest.photo_path(entry)), Path(entry.photo).stem)
        points = record.points
        if tuple(record.canvas) != (side, side):
            points = _rescale_points(points, record.canvas, side)
        if photo.pixels.shape[:2] != (side, side):
            photo = resize_photo(photo, side)
        mask_path = manifest.mask_path(entry)
        gt_mask = resize_mask(load_mask_png(mask_path), side) if mask_path is not None else None
        sketch = absolute_to_offsets(points, 1.0, (side, side))
        samples.append(PairedSample(photo, sketch, gt_mask))
    return samples


def resize_photo(photo: PhotoSample, side: int) -> PhotoSample:
    """Bilinear resize (half-pixel convention) to side x side."""
    if side <= 0:
        raise ConfigError("Photo side must be positive", {"side": side})
    resized = np.clip(resize_array(photo.pixels, side), 0.0, 1.0)
    return PhotoSample(resized, photo.id)


def sample_affine(
    rng: np.random.Generator, config: AffineConfig, canvas: Tuple[int, int] = (64, 64)
) -> AffineTransform:
    """Draw a transform kind by weight, then its parameter uniformly.

    Raises:
        ConfigError: no kind has positive weight
    """
    kinds = [k for k, w in config.kind_weights.items() if w > 0]
    if not kinds:
        raise ConfigError("No affine transform kind has positive weight")
    weights = np.array([config.kind_weights[k] for k in kinds], dtype=np.float64)
    kind = kinds[int(rng.choice(len(kinds), p=weights / weights.sum()))]
    canvas = tuple(canvas)
    if kind == "rotate":
        return AffineTransform("rotate", angle=float(rng.uniform(*config.rotation_range)), canvas=canvas)
    if kind == "scale":
        return AffineTransform("scale", factor=float(rng.uniform(*config.scale_range)), canvas=canvas)
    return AffineTransform(kind, canvas=canvas)


def _shape_outline(kind: str, area: float, rng: np.random.Generator) -> Tuple[np.ndarray, Tuple[float, float]]:
    """Vertices about the origin for a shape of the given area, plus its half extents."""
    angle = float(rng.uniform(0.0, 2.0 * math.pi))
    if kind == "circle":
        r = math.sqrt(area / math.pi)
        n = max(24, int(math.ceil(2.0 * math.pi * r)))
        t = angle + 2.0 * math.pi * np.arange(n) / n
        return np.stack([r * np.cos(t), r * np.sin(t)], axis=1), (r, r)
    if kind == "rectangle":
        aspect = float(rng.uniform(0.6, 1.6))
        a = math.sqrt(area * aspect) / 2.0
        b = math.sqrt(area / aspect) / 2.0
        return np.array([[-a, -b], [a, -b], [a, b], [-a, b]]), (a, b)
    if kind == "triangle":
        r = math.sqrt(4.0 * area / (3.0 * math.sqrt(3.0)))
        t = angle + 2.0 * math.pi * np.arange(3) / 3
    elif kind == "star":
        r = math.sqrt(area / (2.5 * math.sin(math.radians(36.0))))
        t = angle + math.pi * np.arange(10) / 5
        radii = np.where(np.arange(10) % 2 == 0, r, 0.5 * r)
        return np.stack([radii * np.cos(t), radii * np.sin(t)], axis=1), (r, r)
    else:
        raise ConfigError(f"Unknown shape kind '{kind}'")
    return np.stack([r * np.cos(t), r * np.sin(t)], axis=1), (r, r)


def _fill_polygon(vertices: np.ndarray, side: int) -> np.ndarray:
    image = Image.new("L", (side, side), 0)
    ImageDraw.Draw(image).polygon([tuple(v) for v in vertices.tolist()], fill=255, outline=255)
    return np.asarray(image) > 0


def _background(rng: np.random.Generator, side: int, level: float) -> Tuple[np.ndarray, np.ndarray]:
    base = rng.uniform(0.2, 0.8, 3)
    cells = max(side // 8, 2)
    coarse = resize_array(rng.uniform(-1.0, 1.0, (cells, cells, 3)), side)
    fine = rng.uniform(-1.0, 1.0, (side, side, 3))
    return np.clip(base + level * coarse + 0.5 * level * fine, 0.0, 1.0), base


def generate_synthetic_pair(
    rng_seed: Union[int, Sequence[int]], config: SynthConfig, sample_id: str = ""
) -> PairedSample:
    """One textured photo with a single filled shape, its outline sketch and mask.

    The outline is RDP-simplified and converted to stroke-5 with scale 1;
    the mask's area fraction is guaranteed to lie within
    ``config.area_bounds``.

    Raises:
        ConfigError: the canvas cannot hold a shape of the minimum size
            within the area bounds
    """
    side = config.canvas
    if side < config.min_shape_size + 4:
        raise ConfigError(
            "Canvas too small for the minimum shape size",
            {"canvas": side, "min_shape_size": config.min_shape_size},
        )
    rng = np.random.default_rng(rng_seed)
    lo, hi = config.area_bounds
    for _ in range(200):
        kind = config.shapes[int(rng.integers(len(config.shapes)))]
        fraction = float(rng.uniform(lo, hi))
        outline, (ex, ey) = _shape_outline(kind, fraction * side * side, rng)
        if 2.0 * min(ex, ey) < config.min_shape_size or max(ex, ey) > side / 2.0 - 1.0:
            continue
        centre = np.array([rng.uniform(ex, side - 1.0 - ex), rng.uniform(ey, side - 1.0 - ey)])
        vertices = outline + centre
        mask = _fill_polygon(vertices, side)
        if lo <= mask.mean() <= hi:
            break
    else:
        raise ConfigError(
            "Could not place a shape within the area bounds",
            {"canvas": side, "area_bounds": config.area_bounds},
        )

    background, base = _background(rng, side, config.texture_level)
    colour = rng.uniform(0.0, 1.0, 3)
    while np.linalg.norm(colour - base) < 0.35:
        colour = rng.uniform(0.0, 1.0, 3)
    shading = 0.25 * config.texture_level * rng.uniform(-1.0, 1.0, (side, side, 3))
    pixels = np.where(mask[..., None], np.clip(colour + shading, 0.0, 1.0), background)

    closed = [tuple(v) for v in vertices.tolist()] + [tuple(vertices[0].tolist())]
    simplified = rdp_simplify(closed, config.epsilon)
    points = [AbsPoint(x, y, 1 if i == 0 else 0) for i, (x, y) in enumerate(simplified)]
    sketch = absolute_to_offsets(points, 1.0, (side, side))
    return PairedSample(PhotoSample(pixels, sample_id), sketch, mask)


def _split_sizes(config: SynthConfig) -> Dict[str, int]:
    return {"train": config.n_train, "val": config.n_val, "test": config.n_test}


def generate_synthetic_dataset(config: SynthConfig) -> Dict[str, List[PairedSample]]:
    """All splits, each sample seeded by (seed, split, index)."""
    dataset = {}
    for code, (split, count) in enumerate(_split_sizes(config).items()):
        dataset[split] = [
            generate_synthetic_pair([config.seed, code, i], config, f"{split}_{i:04d}")
            for i in range(count)
        ]
    return dataset


def write_synthetic_dataset(config: SynthConfig, out_dir: Union[str, Path]) -> Tuple[str, List[str]]:
    """Write photos, masks, NDJSON sketches and the manifest.

    Returns:
        (manifest path, every written path)
    """
    root = Path(out_dir)
    dataset = generate_synthetic_dataset(config)
    entries, records, written = [], [], []
    for split in SPLITS:
        for sample in dataset[split]:
            name = f"{sample.id}.png"
            written.append(save_png(root / "photos" / name, sample.photo.pixels))
            written.append(save_mask_png(root / "masks" / name, sample.gt_mask))
            entries.append(ManifestEntry(name, len(records), split, name))
            records.append(SketchRecord((config.canvas, config.canvas), offsets_to_absolute(sample.sketch)))
    write_ndjson(root / "sketches.ndjson", records)
    written.append(str(root / "sketches.ndjson"))
    manifest = DatasetManifest(root, "photos", "sketches.ndjson", entries, "masks", config.seed)
    manifest_path = write_manifest(manifest, root / "manifest.json")
    written.append(manifest_path)
    return manifest_path, written


def photo_tensor(photo: PhotoSample, normalization: str = "none") -> torch.Tensor:
    """3 x H x W float32 tensor, optionally ImageNet-normalized."""
    tensor = torch.from_numpy(np.ascontiguousarray(photo.pixels.transpose(2, 0, 1))).float()
    if normalization == "imagenet":
        mean = torch.tensor(IMAGENET_MEAN)[:, None, None]
        std = torch.tensor(IMAGENET_STD)[:, None, None]
        tensor = (tensor - mean) / std
    return tensor


class SketchPhotoDataset(Dataset):
    """Fixed-length tensors for batching.

    Sketches longer than ``T_max`` are skipped and counted in ``skipped``.
    Items are dicts with ``photo`` (3 x H x W), ``points`` (T_max x 5),
    ``mask`` (T_max), ``gt_mask`` (H x W, zeros when absent), ``has_mask``
    and ``index`` (position in the original sample list).
    """

    def __init__(
        self,
        samples: Sequence[PairedSample],
        T_max: int,
        scale_factor: float = 1.0,
        normalization: str = "none",
    ):
        self.samples: List[PairedSample] = []
        self.indices: List[int] = []
        self.skipped = 0
        self.T_max = T_max
        self.scale_factor = scale_factor
        self.normalization = normalization
        for index, sample in enumerate(samples):
            if sample.sketch.length > T_max:
                self.skipped += 1
                continue
            sketch = sample.sketch.rescaled(scale_factor)
            self.samples.append(PairedSample(sample.photo, sketch, sample.gt_mask))
            self.indices.append(index)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, idx: int) -> dict:
        sample = self.samples[idx]
        points, mask = pad_and_mask(sample.sketch, self.T_max)
        photo = photo_tensor(sample.photo, self.normalization)
        if sample.gt_mask is not None:
            gt = torch.from_numpy(sample.gt_mask.astype(np.float32))
        else:
            gt = torch.zeros(photo.shape[-2:], dtype=torch.float32)
        return {
            "photo": photo,
            "points": torch.from_numpy(points).float(),
            "mask": torch.from_numpy(mask).float(),
            "gt_mask": gt,
            "has_mask": sample.gt_mask is not None,
            "index": self.indices[idx],
        }


def build_datasets(
    samples: Dict[str, List[PairedSample]], config: TrainConfig
) -> Tuple[Dict[str, SketchPhotoDataset], float]:
    """Datasets per split sharing the train split's offset scale.

    The ``raw_offsets`` ablation keeps pixel units (scale 1).
    """
    if config.has("raw_offsets"):
        scale = 1.0
    else:
        train = [s.sketch for s in samples.get("train", []) if s.sketch.length <= config.T_max]
        scale = compute_offset_scale(train)
    datasets = {
        split: SketchPhotoDataset(items, config.T_max, scale, config.photo_normalization)
        for split, items in samples.items()
    }
    return datasets, scale


def load_dataset_splits(
    manifest_path: Union[str, Path], config: TrainConfig, splits: Sequence[str] = SPLITS
) -> Dict[str, List[PairedSample]]:
    manifest = load_manifest(manifest_path)
    return {split: load_samples(manifest, split, config.image_side) for split in splits}

"""Sketch geometry and representation.

Sketches live in two formats:

* absolute: a list of ``AbsPoint(x, y, b)`` in canvas pixels, where ``b = 1``
  marks the first point of a stroke;
* stroke-5: a ``SketchSequence`` of rows ``(dx, dy, p1, p2, p3)`` holding
  offsets divided by a dataset scale factor and a one-hot pen state
  (p1 keep drawing, p2 lift the pen, p3 end of drawing).

Coordinates use pixel centres: pixel ``(i, j)`` spans ``[i - 0.5, i + 0.5]``,
so the canvas centre is ``((W - 1) / 2, (H - 1) / 2)``.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, ImageDraw

from src.errors import (
    DegenerateDataset,
    FileSystemError,
    InvalidSketch,
    SequenceTooLong,
    UnsupportedTransform,
    ValidationError,
)


START_TOKEN = (0.0, 0.0, 1.0, 0.0, 0.0)
END_ROW = (0.0, 0.0, 0.0, 0.0, 1.0)


class AbsPoint(NamedTuple):
    """Absolute canvas point; ``b = 1`` starts a new stroke."""
    x: float
    y: float
    b: int


@dataclass
class SketchSequence:
    """A stroke-5 sequence.

    Attributes:
        points: (T, 5) float64 array of (dx, dy, p1, p2, p3)
        canvas: (H, W) of the drawing surface, if known
        scale_factor: Divisor applied to the raw pixel offsets
        origin: Absolute position of the first point, if known
    """
    points: np.ndarray
    canvas: Optional[Tuple[int, int]] = None
    scale_factor: float = 1.0
    origin: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 5:
            raise InvalidSketch(
                "Stroke-5 points must have shape (T, 5)",
                {"shape": tuple(self.points.shape)},
            )
        if self.points.shape[0] < 1:
            raise InvalidSketch("Stroke-5 sequence must contain at least one point")
        if self.scale_factor <= 0:
            raise InvalidSketch("scale_factor must be positive", {"scale_factor": self.scale_factor})

    @property
    def length(self) -> int:
        return int(self.points.shape[0])

    @property
    def is_complete(self) -> bool:
        """Exactly one end-of-drawing row, placed last."""
        ends = np.flatnonzero(self.points[:, 4] == 1.0)
        return len(ends) == 1 and ends[0] == self.length - 1

    def rescaled(self, scale_factor: float) -> "SketchSequence":
        """Re-express the offsets relative to another scale factor."""
        if scale_factor <= 0:
            raise InvalidSketch("scale_factor must be positive", {"scale_factor": scale_factor})
        points = self.points.copy()
        points[:, :2] *= self.scale_factor / scale_factor
        return SketchSequence(points, self.canvas, scale_factor, self.origin)

    def raw_offsets(self) -> np.ndarray:
        """(T, 2) offsets in canvas pixels."""
        return self.points[:, :2] * self.scale_factor


@dataclass
class Raster:
    """Binary rendering of a sketch.

    Attributes:
        pixels: (H, W) uint8 array of 0/1
        clamped: True when any point had to be moved onto the canvas
    """
    pixels: np.ndarray
    clamped: bool = False


@dataclass(frozen=True)
class AffineTransform:
    """Parametric transform shared by photos, sketches and saliency maps.

    Flips and rotations act about the canvas centre, scaling about the
    canvas origin (pixel ``(0, 0)``). Positive angles rotate
    counter-clockwise as displayed (y axis pointing down). Compositions
    produce ``kind="affine"`` with an explicit 3x3 matrix.
    """
    kind: str = "identity"
    angle: float = 0.0
    factor: float = 1.0
    canvas: Tuple[int, int] = (64, 64)
    explicit: Optional[Tuple[float, ...]] = field(default=None, compare=True)

    def __post_init__(self):
        if self.kind not in ("identity", "hflip", "vflip", "rotate", "scale", "affine"):
            raise UnsupportedTransform(f"Unsupported transform kind '{self.kind}'")
        if self.kind == "scale" and not (self.factor > 0 and math.isfinite(self.factor)):
            raise UnsupportedTransform("Scale factor must be positive", {"factor": self.factor})
        if self.kind == "rotate" and not math.isfinite(self.angle):
            raise UnsupportedTransform("Rotation angle must be finite", {"angle": self.angle})
        if self.kind == "affine":
            if self.explicit is None or len(self.explicit) != 9:
                raise UnsupportedTransform("Affine transform needs an explicit 3x3 matrix")
            if abs(np.linalg.det(np.asarray(self.explicit).reshape(3, 3))) < 1e-12:
                raise UnsupportedTransform("Affine matrix is not invertible")

    @classmethod
    def identity(cls, canvas: Tuple[int, int]) -> "AffineTransform":
        return cls("identity", canvas=tuple(canvas))

    @property
    def is_identity(self) -> bool:
        return self.kind == "identity"

    def matrix(self) -> np.ndarray:
        """3x3 homogeneous matrix acting on (x, y, 1) in canvas pixels."""
        h, w = self.canvas
        cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
        if self.kind == "identity":
            return np.eye(3)
        if self.kind == "hflip":
            return np.array([[-1.0, 0.0, w - 1.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        if self.kind == "vflip":
            return np.array([[1.0, 0.0, 0.0], [0.0, -1.0, h - 1.0], [0.0, 0.0, 1.0]])
        if self.kind == "rotate":
            theta = math.radians(self.angle)
            c, s = math.cos(theta), math.sin(theta)
            to_centre = np.array([[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]])
            rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
            back = np.array([[1.0, 0.0, cx], [0.0, 1.0, cy], [0.0, 0.0, 1.0]])
            return back @ rot @ to_centre
        if self.kind == "scale":
            return np.diag([self.factor, self.factor, 1.0])
        return np.asarray(self.explicit, dtype=np.float64).reshape(3, 3)

    def linear(self) -> np.ndarray:
        """2x2 linear part; offsets transform by this alone."""
        return self.matrix()[:2, :2]

    def inverse(self) -> "AffineTransform":
        if self.kind in ("identity", "hflip", "vflip"):
            return self
        if self.kind == "rotate":
            return AffineTransform("rotate", angle=-self.angle, canvas=self.canvas)
        if self.kind == "scale":
            return AffineTransform("scale", factor=1.0 / self.factor, canvas=self.canvas)
        inv = np.linalg.inv(self.matrix())
        return AffineTransform("affine", canvas=self.canvas, explicit=tuple(inv.ravel().tolist()))

    def then(self, other: "AffineTransform") -> "AffineTransform":
        """Transform applying ``self`` first and ``other`` second."""
        return compose_transforms(self, other)


def compose_transforms(first: AffineTransform, second: AffineTransform) -> AffineTransform:
    """Compose two transforms on the same canvas; identity is neutral."""
    if tuple(first.canvas) != tuple(second.canvas):
        raise UnsupportedTransform(
            "Cannot compose transforms on different canvases",
            {"first": first.canvas, "second": second.canvas},
        )
    if first.is_identity:
        return second
    if second.is_identity:
        return first
    matrix = second.matrix() @ first.matrix()
    return AffineTransform("affine", canvas=first.canvas, explicit=tuple(matrix.ravel().tolist()))


def _as_abs_array(sketch: Union[Sequence[AbsPoint], np.ndarray]) -> np.ndarray:
    arr = np.asarray(sketch, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InvalidSketch("Absolute sketch must be a sequence of (x, y, b)", {"shape": tuple(arr.shape)})
    return arr


def absolute_to_offsets(
    sketch: Union[Sequence[AbsPoint], np.ndarray],
    scale_factor: float = 1.0,
    canvas: Optional[Tuple[int, int]] = None,
) -> SketchSequence:
    """Convert absolute points to a stroke-5 sequence.

    Row ``i`` holds the move from point ``i`` to point ``i + 1``; it carries
    p2 when point ``i + 1`` starts a new stroke and p1 otherwise. A final
    ``(0, 0, 0, 0, 1)`` row terminates the drawing, so ``n`` points give
    ``n`` rows.

    Raises:
        InvalidSketch: empty input, non-finite coordinates, stroke tokens
            outside {0, 1}, or a first point that does not start a stroke
    """
    arr = _as_abs_array(sketch)
    if arr.shape[0] == 0:
        raise InvalidSketch("Sketch is empty", {"operation": "absolute_to_offsets"})
    if not np.all(np.isfinite(arr)):
        raise InvalidSketch("Sketch has non-finite coordinates", {"operation": "absolute_to_offsets"})
    if not np.all(np.isin(arr[:, 2], (0.0, 1.0))):
        raise InvalidSketch("Stroke tokens must be 0 or 1", {"operation": "absolute_to_offsets"})
    if arr[0, 2] != 1.0:
        raise InvalidSketch("First point must start a stroke (b = 1)", {"operation": "absolute_to_offsets"})
    if not scale_factor > 0:
        raise InvalidSketch("scale_factor must be positive", {"scale_factor": scale_factor})

    n = arr.shape[0]
    points = np.zeros((n, 5), dtype=np.float64)
    points[: n - 1, 0:2] = (arr[1:, 0:2] - arr[:-1, 0:2]) / scale_factor
    lifts = arr[1:, 2] == 1.0
    points[: n - 1, 2] = np.where(lifts, 0.0, 1.0)
    points[: n - 1, 3] = np.where(lifts, 1.0, 0.0)
    points[n - 1] = END_ROW
    return SketchSequence(points, canvas, float(scale_factor), (float(arr[0, 0]), float(arr[0, 1])))


def offsets_to_absolute(
    seq: SketchSequence, origin: Optional[Tuple[float, float]] = None
) -> List[AbsPoint]:
    """Rebuild absolute points by cumulative summation from ``origin``.

    ``origin`` defaults to ``seq.origin`` and then to (0, 0). Rows after the
    first end-of-drawing row are ignored.
    """
    if origin is None:
        origin = seq.origin if seq.origin is not None else (0.0, 0.0)
    rows = seq.points
    ends = np.flatnonzero(rows[:, 4] == 1.0)
    last = int(ends[0]) if len(ends) else rows.shape[0]

    result = [AbsPoint(float(origin[0]), float(origin[1]), 1)]
    x, y = float(origin[0]), float(origin[1])
    for row in rows[:last]:
        x += row[0] * seq.scale_factor
        y += row[1] * seq.scale_factor
        result.append(AbsPoint(x, y, 1 if row[3] == 1.0 else 0))
    return result


def _segment_distances(points: np.ndarray, start: np.ndarray, end: np.ndarray) -> np.ndarray:
    """Distances from ``points`` to the closed segment start-end."""
    direction = end - start
    length_sq = float(direction @ direction)
    if length_sq == 0.0:
        return np.hypot(*(points - start).T)
    t = np.clip(((points - start) @ direction) / length_sq, 0.0, 1.0)
    projection = start + t[:, None] * direction
    return np.hypot(*(points - projection).T)


def rdp_simplify(polyline: Sequence[Tuple[float, float]], epsilon: float) -> list:
    """Ramer-Douglas-Peucker simplification.

    A chain is split at its farthest interior point (first one on ties)
    whenever that distance is at least ``epsilon``; otherwise only its
    endpoints are kept. Distances are measured to the chord as a segment,
    so every removed point lies within ``epsilon`` of the output.
    """
    if len(polyline) < 2:
        raise InvalidSketch("RDP needs at least two points", {"points": len(polyline)})
    if epsilon < 0:
        raise ValidationError("RDP epsilon must be non-negative", {"epsilon": epsilon})

    coords = np.asarray(polyline, dtype=np.float64)[:, :2]
    keep = np.zeros(len(coords), dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, len(coords) - 1)]
    while stack:
        first, last = stack.pop()
        if last - first < 2:
            continue
        d = _segment_distances(coords[first + 1:last], coords[first], coords[last])
        index = int(np.argmax(d))
        if d[index] >= epsilon:
            split = first + 1 + index
            keep[split] = True
            stack.append((split, last))
            stack.append((first, split))
    return [polyline[i] for i in np.flatnonzero(keep)]


def split_strokes(sketch: Sequence[AbsPoint]) -> List[List[Tuple[float, float]]]:
    """Group absolute points into strokes at every ``b = 1``."""
    strokes: List[List[Tuple[float, float]]] = []
    for x, y, b in sketch:
        if b == 1 or not strokes:
            strokes.append([])
        strokes[-1].append((float(x), float(y)))
    return strokes


def join_strokes(strokes: Iterable[Sequence[Sequence[float]]]) -> List[AbsPoint]:
    """Flatten strokes into absolute points, marking each stroke start."""
    points = []
    for stroke in strokes:
        for i, (x, y) in enumerate(stroke):
            points.append(AbsPoint(float(x), float(y), 1 if i == 0 else 0))
    return points


def rasterize(sketch: Sequence[AbsPoint], canvas: Tuple[int, int], line_width: int = 1) -> Raster:
    """Draw each stroke as connected digital lines on a binary H x W raster.

    Points are rounded to the nearest pixel. Out-of-canvas points are
    clamped onto the border and reported through ``Raster.clamped``.
    """
    h, w = canvas
    if line_width < 1:
        raise ValidationError("line_width must be at least 1", {"line_width": line_width})
    image = Image.new("L", (w, h), 0)
    draw = ImageDraw.Draw(image)
    clamped = False
    for stroke in split_strokes(sketch):
        pixels = []
        for x, y in stroke:
            px, py = int(round(x)), int(round(y))
            cx, cy = min(max(px, 0), w - 1), min(max(py, 0), h - 1)
            clamped = clamped or (cx, cy) != (px, py)
            pixels.append((cx, cy))
        if len(pixels) == 1:
            x, y = pixels[0]
            if line_width == 1:
                draw.point((x, y), fill=1)
            else:
                r = (line_width - 1) / 2.0
                draw.ellipse((x - r, y - r, x + r, y + r), fill=1)
        else:
            draw.line(pixels, fill=1, width=line_width)
    return Raster(np.asarray(image, dtype=np.uint8), clamped)


def apply_affine_sketch(sketch: Sequence[AbsPoint], t: AffineTransform) -> List[AbsPoint]:
    """Map every point through ``t``; stroke tokens are unchanged."""
    if not isinstance(t, AffineTransform):
        raise UnsupportedTransform("Expected an AffineTransform", {"got": type(t).__name__})
    if t.is_identity:
        return list(sketch)
    m = t.matrix()
    out = []
    for x, y, b in sketch:
        nx = m[0, 0] * x + m[0, 1] * y + m[0, 2]
        ny = m[1, 0] * x + m[1, 1] * y + m[1, 2]
        out.append(AbsPoint(float(nx), float(ny), b))
    return out


def apply_affine_offsets(seq: SketchSequence, t: AffineTransform) -> SketchSequence:
    """Transform a stroke-5 sequence; translations cancel in offsets."""
    if t.is_identity:
        return seq
    points = seq.points.copy()
    points[:, :2] = points[:, :2] @ t.linear().T
    origin = None
    if seq.origin is not None:
        ox, oy, _ = t.matrix() @ np.array([seq.origin[0], seq.origin[1], 1.0])
        origin = (float(ox), float(oy))
    return SketchSequence(points, seq.canvas, seq.scale_factor, origin)


def pad_and_mask(seq: SketchSequence, T_max: int) -> Tuple[np.ndarray, np.ndarray]:
    """Zero-pad to ``T_max`` rows and return the 1/0 validity mask."""
    if seq.length > T_max:
        raise SequenceTooLong(
            "Sequence exceeds the maximum length",
            {"length": seq.length, "T_max": T_max},
        )
    padded = np.zeros((T_max, 5), dtype=np.float64)
    padded[: seq.length] = seq.points
    mask = np.zeros(T_max, dtype=np.float64)
    mask[: seq.length] = 1.0
    return padded, mask


def compute_offset_scale(dataset: Iterable[Union[SketchSequence, np.ndarray]]) -> float:
    """Population standard deviation of all pooled dx and dy values.

    End-of-drawing rows carry no movement and are excluded. Arrays are
    read as raw pixel offsets; SketchSequence offsets are un-scaled first.

    Raises:
        DegenerateDataset: the dataset is empty or every offset is equal
    """
    pooled = []
    for item in dataset:
        if isinstance(item, SketchSequence):
            rows = item.points
            offsets = item.raw_offsets()
        else:
            rows = np.asarray(item, dtype=np.float64)
            offsets = rows[:, :2]
        if rows.shape[1] == 5:
            offsets = offsets[rows[:, 4] != 1.0]
        pooled.append(offsets.ravel())
    if not pooled or sum(p.size for p in pooled) == 0:
        raise DegenerateDataset("No offsets to compute a scale from")
    values = np.concatenate(pooled)
    scale = float(np.std(values))
    if not scale > 0:
        raise DegenerateDataset("Offsets have zero spread", {"values": values.size})
    return scale


@dataclass
class SketchRecord:
    """One NDJSON sketch: canvas size and absolute strokes."""
    canvas: Tuple[int, int]
    points: List[AbsPoint]

    def to_dict(self) -> dict:
        return {
            "canvas": [int(self.canvas[0]), int(self.canvas[1])],
            "strokes": [[[x, y] for x, y in stroke] for stroke in split_strokes(self.points)],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SketchRecord":
        canvas = tuple(int(v) for v in data["canvas"])
        return cls(canvas, join_strokes(data["strokes"]))


def write_ndjson(path: Union[str, Path], records: Iterable[SketchRecord]) -> None:
    output_path = Path(path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    with open(output_path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record.to_dict(), separators=(",", ":")) + "\n")


def read_ndjson(path: Union[str, Path]) -> List[SketchRecord]:
    """Read sketches, rejecting empty and one-point drawings.

    Raises:
        FileSystemError: the file is missing or a line is not valid JSON
        InvalidSketch: a record has fewer than two points
    """
    input_path = Path(path)
    if not input_path.exists():
        raise FileSystemError("Sketch file not found", {"file_path": str(input_path)})
    records = []
    with open(input_path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = SketchRecord.from_dict(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise FileSystemError(
                    "Malformed sketch record",
                    {"file_path": str(input_path), "line": line_number, "cause": str(e)},
                )
            if len(record.points) < 2:
                raise InvalidSketch(
                    "Sketches need at least two points",
                    {"file_path": str(input_path), "line": line_number},
                )
            records.append(record)
    return records

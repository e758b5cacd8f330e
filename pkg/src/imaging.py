"""Raster-side helpers: bilinear resampling, affine warping and PNG I/O.

All resampling uses the half-pixel convention (pixels are unit squares,
``align_corners=False``), shared by photo resizing, pyramid fusion and
saliency upsampling. Tensors are laid out N x C x H x W.
"""

from pathlib import Path
from typing import Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from src.errors import FileSystemError, ShapeError, UnsupportedTransform
from src.sketch_vector import AffineTransform


def bilinear_resize(x: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
    """Bilinear resampling of an N x C x H x W tensor to ``size``."""
    if x.dim() != 4:
        raise ShapeError("bilinear_resize expects N x C x H x W", {"shape": tuple(x.shape)})
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


def resize_array(pixels: np.ndarray, side: int) -> np.ndarray:
    """Resize an H x W x C float array to side x side (float64)."""
    tensor = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float64)).permute(2, 0, 1)[None]
    resized = bilinear_resize(tensor, (side, side))
    return resized[0].permute(1, 2, 0).numpy()


def grid_matrix(t: AffineTransform, grid: Tuple[int, int]) -> np.ndarray:
    """Express ``t`` (defined on canvas pixels) on an h x w grid of the same canvas."""
    canvas_h, canvas_w = t.canvas
    h, w = grid
    sx, sy = canvas_w / w, canvas_h / h
    # grid pixel centre u maps to canvas coordinate (u + 0.5) * s - 0.5
    to_canvas = np.array([[sx, 0.0, 0.5 * sx - 0.5], [0.0, sy, 0.5 * sy - 0.5], [0.0, 0.0, 1.0]])
    return np.linalg.inv(to_canvas) @ t.matrix() @ to_canvas


def warp_image(x: torch.Tensor, t: AffineTransform) -> torch.Tensor:
    """Apply ``t`` to every map of an N x C x h x w tensor.

    The output at grid position p is the input sampled at ``t^-1(p)``,
    bilinearly, with zeros outside. Identity and flips are exact index
    operations. Differentiable with respect to ``x``.

    Raises:
        UnsupportedTransform: the transform is singular on this grid
    """
    if x.dim() != 4:
        raise ShapeError("warp_image expects N x C x H x W", {"shape": tuple(x.shape)})
    if t.is_identity:
        return x
    if t.kind == "hflip":
        return torch.flip(x, dims=[3])
    if t.kind == "vflip":
        return torch.flip(x, dims=[2])

    h, w = x.shape[-2:]
    m = grid_matrix(t, (h, w))
    if abs(np.linalg.det(m)) < 1e-12:
        raise UnsupportedTransform("Transform is not invertible on the grid", {"kind": t.kind})
    inverse = np.linalg.inv(m)
    # normalized coordinate n = (2u + 1) / size - 1
    norm = np.array([[2.0 / w, 0.0, 1.0 / w - 1.0], [0.0, 2.0 / h, 1.0 / h - 1.0], [0.0, 0.0, 1.0]])
    theta = norm @ inverse @ np.linalg.inv(norm)
    theta_t = torch.as_tensor(theta[:2], dtype=x.dtype, device=x.device)
    theta_t = theta_t.unsqueeze(0).expand(x.shape[0], 2, 3)
    grid = F.affine_grid(theta_t, list(x.shape), align_corners=False)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=False)


def load_png(path: Union[str, Path]) -> np.ndarray:
    """Read an RGB image as an H x W x 3 float32 array in [0, 1]."""
    image_path = Path(path)
    if not image_path.exists():
        raise FileSystemError("Image not found", {"file_path": str(image_path)})
    try:
        with Image.open(image_path) as image:
            rgb = np.asarray(image.convert("RGB"), dtype=np.float32)
    except OSError as e:
        raise FileSystemError("Unreadable image", {"file_path": str(image_path), "cause": str(e)})
    return rgb / 255.0


def save_png(path: Union[str, Path], pixels: np.ndarray) -> str:
    """Write an H x W x 3 array in [0, 1] as an 8-bit RGB PNG."""
    output_path = Path(path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    data = np.clip(np.rint(np.asarray(pixels, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(output_path)
    return str(output_path)


def load_mask_png(path: Union[str, Path]) -> np.ndarray:
    """Read a single-channel 0/255 mask as a boolean array."""
    mask_path = Path(path)
    if not mask_path.exists():
        raise FileSystemError("Mask not found", {"file_path": str(mask_path)})
    with Image.open(mask_path) as image:
        return np.asarray(image.convert("L")) > 127


def save_mask_png(path: Union[str, Path], mask: np.ndarray) -> str:
    """Write a boolean mask as a single-channel 0/255 PNG."""
    output_path = Path(path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    data = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(data).save(output_path)
    return str(output_path)


def save_gray_png(path: Union[str, Path], values: np.ndarray) -> str:
    """Write values in [0, 1] as 8-bit gray, round(255 * v)."""
    output_path = Path(path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    data = np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(output_path)
    return str(output_path)


def resize_mask(mask: np.ndarray, side: int) -> np.ndarray:
    """Nearest-neighbour resize of a boolean mask."""
    if mask.shape == (side, side):
        return mask.astype(bool)
    image = Image.fromarray(np.where(mask, 255, 0).astype(np.uint8))
    return np.asarray(image.resize((side, side), Image.NEAREST)) > 127

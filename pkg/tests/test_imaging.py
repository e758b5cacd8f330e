"""Unit tests for resampling, warping and PNG I/O."""

import numpy as np
import pytest
import torch

from src.errors import FileSystemError, ShapeError
from src.imaging import (
    bilinear_resize,
    grid_matrix,
    load_mask_png,
    load_png,
    resize_mask,
    save_gray_png,
    save_mask_png,
    save_png,
    warp_image,
)
from src.sketch_vector import AbsPoint, AffineTransform, apply_affine_sketch


class TestBilinearResize:
    """Tests for bilinear_resize()."""

    def test_constant_map_stays_constant(self):
        """Test resampling preserves constants in both directions."""
        x = torch.full((1, 2, 4, 4), 0.25, dtype=torch.float64)

        assert torch.allclose(bilinear_resize(x, (16, 16)), torch.full((1, 2, 16, 16), 0.25, dtype=torch.float64))
        assert torch.allclose(bilinear_resize(x, (2, 2)), torch.full((1, 2, 2, 2), 0.25, dtype=torch.float64))

    def test_half_pixel_downscale_averages_blocks(self):
        """Test a 2x bilinear downscale averages each 2x2 block."""
        x = torch.arange(16, dtype=torch.float64).reshape(1, 1, 4, 4)

        out = bilinear_resize(x, (2, 2))

        expected = x.reshape(2, 2, 2, 2).permute(0, 2, 1, 3).reshape(2, 2, 4).mean(-1)
        assert torch.allclose(out[0, 0], expected)

    def test_same_size_is_identity(self):
        """Test no resampling happens at the same size."""
        x = torch.rand(1, 1, 5, 5)

        assert bilinear_resize(x, (5, 5)) is x

    def test_rejects_wrong_rank(self):
        """Test non-4D input is refused."""
        with pytest.raises(ShapeError):
            bilinear_resize(torch.zeros(4, 4), (2, 2))


class TestWarpImage:
    """Tests for warp_image()."""

    def test_hflip_is_exact(self):
        """Test a flip reverses columns exactly."""
        x = torch.arange(12, dtype=torch.float64).reshape(1, 1, 3, 4)

        out = warp_image(x, AffineTransform("hflip", canvas=(3, 4)))

        assert torch.equal(out, torch.flip(x, dims=[3]))

    def test_identity_returns_input(self):
        """Test the identity transform is a no-op."""
        x = torch.rand(2, 3, 8, 8)

        assert warp_image(x, AffineTransform.identity((8, 8))) is x

    def test_rotation_moves_a_dot_like_the_sketch(self):
        """Test images and sketch points move consistently under rotation."""
        x = torch.zeros(1, 1, 33, 33, dtype=torch.float64)
        x[0, 0, 16, 26] = 1.0
        t = AffineTransform("rotate", angle=90.0, canvas=(33, 33))

        out = warp_image(x, t)

        (moved,) = apply_affine_sketch([AbsPoint(26.0, 16.0, 1)], t)
        row, col = np.unravel_index(int(out[0, 0].argmax()), (33, 33))
        assert (col, row) == (round(moved.x), round(moved.y))
        assert float(out[0, 0].max()) == pytest.approx(1.0, abs=1e-9)

    def test_warp_on_a_coarser_grid(self):
        """Test grid_matrix expresses a canvas flip as the grid flip."""
        m = grid_matrix(AffineTransform("hflip", canvas=(64, 64)), (2, 2))

        np.testing.assert_allclose(m, [[-1, 0, 1], [0, 1, 0], [0, 0, 1]], atol=1e-12)

    def test_gradients_flow(self):
        """Test warping is differentiable with respect to the input."""
        x = torch.rand(1, 1, 8, 8, dtype=torch.float64, requires_grad=True)
        t = AffineTransform("scale", factor=1.2, canvas=(8, 8))

        assert torch.autograd.gradcheck(lambda v: warp_image(v, t), (x,))


class TestPngIO:
    """Tests for PNG reading and writing."""

    def test_photo_round_trip_is_8_bit(self, tmp_path):
        """Test saved photos reload within one quantization step."""
        pixels = np.random.default_rng(0).uniform(0, 1, (6, 5, 3))
        path = save_png(tmp_path / "photo.png", pixels)

        loaded = load_png(path)

        assert loaded.shape == (6, 5, 3)
        assert loaded.dtype == np.float32
        assert np.abs(loaded - pixels).max() <= 0.5 / 255 + 1e-6

    def test_mask_round_trip(self, tmp_path):
        """Test masks are stored as 0/255 and reload as booleans."""
        mask = np.zeros((4, 4), dtype=bool)
        mask[1:3, 1:3] = True

        loaded = load_mask_png(save_mask_png(tmp_path / "mask.png", mask))

        assert np.array_equal(loaded, mask)

    def test_gray_png_rounds(self, tmp_path):
        """Test saliency values are written as round(255 * v)."""
        from PIL import Image

        path = save_gray_png(tmp_path / "s.png", np.array([[0.0, 0.5], [0.999, 1.0]]))

        with Image.open(path) as image:
            assert image.mode == "L"
            assert np.asarray(image).tolist() == [[0, 128], [255, 255]]

    def test_missing_files(self, tmp_path):
        """Test missing images raise FileSystemError."""
        with pytest.raises(FileSystemError, match="Image not found"):
            load_png(tmp_path / "absent.png")
        with pytest.raises(FileSystemError, match="Mask not found"):
            load_mask_png(tmp_path / "absent.png")

    def test_resize_mask_nearest(self):
        """Test mask resizing keeps the mask binary."""
        mask = np.zeros((4, 4), dtype=bool)
        mask[:2, :2] = True

        resized = resize_mask(mask, 8)

        assert resized.dtype == bool
        assert resized[:4, :4].all()
        assert not resized[4:, :].any()

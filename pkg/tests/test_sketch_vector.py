"""Unit tests for sketch geometry and the stroke-5 representation."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.errors import DegenerateDataset, FileSystemError, InvalidSketch, SequenceTooLong, UnsupportedTransform
from src.sketch_vector import (
    END_ROW,
    AbsPoint,
    AffineTransform,
    SketchRecord,
    SketchSequence,
    _segment_distances,
    absolute_to_offsets,
    apply_affine_offsets,
    apply_affine_sketch,
    compose_transforms,
    compute_offset_scale,
    offsets_to_absolute,
    pad_and_mask,
    rasterize,
    rdp_simplify,
    read_ndjson,
    split_strokes,
    write_ndjson,
)


coordinate = st.floats(min_value=-100.0, max_value=100.0, allow_nan=False)


@st.composite
def sketches(draw):
    n = draw(st.integers(min_value=1, max_value=20))
    points = [AbsPoint(draw(coordinate), draw(coordinate), 1)]
    for _ in range(n - 1):
        points.append(AbsPoint(draw(coordinate), draw(coordinate), draw(st.sampled_from([0, 1]))))
    return points


class TestAbsoluteToOffsets:
    """Tests for absolute_to_offsets()."""

    def test_two_stroke_example(self):
        """Test the row layout for a sketch with a pen lift."""
        points = [AbsPoint(0, 0, 1), AbsPoint(3, 4, 0), AbsPoint(10, 10, 1), AbsPoint(10, 12, 0)]

        seq = absolute_to_offsets(points, scale_factor=2.0, canvas=(64, 64))

        np.testing.assert_allclose(seq.points, [
            [1.5, 2.0, 1, 0, 0],
            [3.5, 3.0, 0, 1, 0],
            [0.0, 1.0, 1, 0, 0],
            list(END_ROW),
        ])
        assert seq.origin == (0.0, 0.0)
        assert seq.is_complete

    def test_single_point(self):
        """Test a one-point sketch is just the end row."""
        seq = absolute_to_offsets([AbsPoint(5, 5, 1)])

        assert seq.length == 1
        np.testing.assert_array_equal(seq.points[0], END_ROW)

    @pytest.mark.parametrize("points, message", [
        ([], "empty"),
        ([AbsPoint(0, 0, 0), AbsPoint(1, 1, 0)], "First point must start a stroke"),
        ([AbsPoint(0, 0, 1), AbsPoint(float("nan"), 1, 0)], "non-finite"),
        ([AbsPoint(0, 0, 1), AbsPoint(1, 1, 2)], "Stroke tokens"),
    ])
    def test_invalid_sketches(self, points, message):
        """Test malformed sketches are rejected."""
        with pytest.raises(InvalidSketch, match=message):
            absolute_to_offsets(points)

    def test_invalid_scale(self):
        """Test a non-positive scale factor is rejected."""
        with pytest.raises(InvalidSketch, match="scale_factor"):
            absolute_to_offsets([AbsPoint(0, 0, 1)], scale_factor=0.0)

    @settings(max_examples=50, deadline=None)
    @given(sketches(), st.floats(min_value=0.1, max_value=20.0))
    def test_offsets_reconstruct_points(self, points, scale):
        """Test cumulative summation from the origin recovers every point and stroke start."""
        seq = absolute_to_offsets(points, scale)
        rebuilt = offsets_to_absolute(seq)

        assert len(rebuilt) == len(points)
        np.testing.assert_allclose([p[:2] for p in rebuilt], [p[:2] for p in points], atol=1e-9)
        assert [p.b for p in rebuilt] == [p.b for p in points]
        assert np.all(seq.points[:, 2:].sum(axis=1) == 1)


class TestOffsetsToAbsolute:
    """Tests for offsets_to_absolute()."""

    def test_stops_at_first_end_row(self):
        """Test rows after the first end-of-drawing row are ignored."""
        rows = np.array([[1, 0, 1, 0, 0], list(END_ROW), [5, 5, 1, 0, 0]], dtype=float)

        points = offsets_to_absolute(SketchSequence(rows), origin=(2.0, 3.0))

        assert points == [AbsPoint(2.0, 3.0, 1), AbsPoint(3.0, 3.0, 0)]

    def test_without_end_row(self):
        """Test an unterminated sequence uses every row."""
        rows = np.array([[1, 1, 1, 0, 0], [1, 1, 0, 1, 0]], dtype=float)

        points = offsets_to_absolute(SketchSequence(rows))

        assert points[-1] == AbsPoint(2.0, 2.0, 1)


class TestRdpSimplify:
    """Tests for rdp_simplify()."""

    def test_collinear_points_collapse(self):
        """Test interior collinear points are dropped."""
        line = [(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (3.0, 0.0)]

        assert rdp_simplify(line, 0.5) == [(0.0, 0.0), (3.0, 0.0)]

    def test_epsilon_zero_keeps_off_line_points(self):
        """Test points exactly on the chord are dropped only when below epsilon."""
        line = [(0.0, 0.0), (1.0, 1.0), (2.0, 0.0)]

        assert rdp_simplify(line, 0.0) == line
        assert rdp_simplify(line, 1.0) == line
        assert rdp_simplify(line, 1.01) == [(0.0, 0.0), (2.0, 0.0)]

    def test_needs_two_points(self):
        """Test degenerate polylines are rejected."""
        with pytest.raises(InvalidSketch):
            rdp_simplify([(0.0, 0.0)], 1.0)

    @settings(max_examples=50, deadline=None)
    @given(
        st.lists(st.tuples(coordinate, coordinate), min_size=2, max_size=30),
        st.floats(min_value=0.0, max_value=10.0),
    )
    def test_simplification_properties(self, polyline, epsilon):
        """Test endpoints are kept, output is a subsequence and removed points stay within epsilon."""
        result = rdp_simplify(polyline, epsilon)

        assert result[0] == polyline[0]
        assert result[-1] == polyline[-1]
        assert len(result) <= len(polyline)
        assert rdp_simplify(result, epsilon) == result

        coords = np.asarray(polyline)
        kept = np.asarray(result)
        for point in coords:
            distances = [
                _segment_distances(point[None], kept[i], kept[i + 1])[0] for i in range(len(kept) - 1)
            ]
            assert min(distances) <= epsilon + 1e-9


class TestAffine:
    """Tests for AffineTransform and its application to sketches."""

    def test_hflip_maps_pixel_centres(self):
        """Test a horizontal flip exchanges column 0 and column W - 1."""
        t = AffineTransform("hflip", canvas=(64, 64))

        flipped = apply_affine_sketch([AbsPoint(0.0, 5.0, 1), AbsPoint(63.0, 7.0, 0)], t)

        assert flipped == [AbsPoint(63.0, 5.0, 1), AbsPoint(0.0, 7.0, 0)]

    def test_rotation_is_counter_clockwise_on_screen(self):
        """Test +90 degrees takes a point right of centre to above it (smaller y)."""
        t = AffineTransform("rotate", angle=90.0, canvas=(65, 65))

        (point,) = apply_affine_sketch([AbsPoint(42.0, 32.0, 1)], t)

        assert point.x == pytest.approx(32.0)
        assert point.y == pytest.approx(22.0)

    def test_scale_about_origin(self):
        """Test scaling keeps pixel (0, 0) fixed."""
        t = AffineTransform("scale", factor=2.0, canvas=(64, 64))

        assert apply_affine_sketch([AbsPoint(3.0, 4.0, 1)], t) == [AbsPoint(6.0, 8.0, 1)]

    def test_identity_is_neutral_for_composition(self):
        """Test composing with identity returns the other transform."""
        t = AffineTransform("rotate", angle=15.0, canvas=(64, 64))
        identity = AffineTransform.identity((64, 64))

        assert compose_transforms(identity, t) is t
        assert compose_transforms(t, identity) is t

    @pytest.mark.parametrize("t", [
        AffineTransform("rotate", angle=23.0, canvas=(64, 64)),
        AffineTransform("scale", factor=1.3, canvas=(64, 64)),
        AffineTransform("vflip", canvas=(64, 64)),
    ])
    def test_inverse(self, t):
        """Test a transform composed with its inverse is the identity matrix."""
        np.testing.assert_allclose(t.then(t.inverse()).matrix(), np.eye(3), atol=1e-12)

    def test_composition_order(self):
        """Test ``then`` applies the receiver first."""
        flip = AffineTransform("hflip", canvas=(64, 64))
        scale = AffineTransform("scale", factor=2.0, canvas=(64, 64))

        (point,) = apply_affine_sketch([AbsPoint(1.0, 1.0, 1)], flip.then(scale))

        assert (point.x, point.y) == pytest.approx((124.0, 2.0))

    def test_different_canvases_do_not_compose(self):
        """Test transforms on different canvases are rejected."""
        with pytest.raises(UnsupportedTransform):
            compose_transforms(AffineTransform("hflip", canvas=(64, 64)), AffineTransform("hflip", canvas=(32, 32)))

    @pytest.mark.parametrize("kwargs", [
        {"kind": "shear"},
        {"kind": "scale", "factor": 0.0},
        {"kind": "rotate", "angle": math.inf},
        {"kind": "affine", "explicit": (0.0,) * 9},
    ])
    def test_unsupported_transforms(self, kwargs):
        """Test unknown kinds and singular parameters are rejected."""
        with pytest.raises(UnsupportedTransform):
            AffineTransform(**kwargs)

    def test_offsets_transform_by_linear_part(self, square_sketch):
        """Test transforming offsets equals converting the transformed absolute sketch."""
        t = AffineTransform("rotate", angle=30.0, canvas=(64, 64))
        seq = absolute_to_offsets(square_sketch, 2.0, (64, 64))

        via_offsets = apply_affine_offsets(seq, t)
        via_points = absolute_to_offsets(apply_affine_sketch(square_sketch, t), 2.0, (64, 64))

        np.testing.assert_allclose(via_offsets.points, via_points.points, atol=1e-12)
        np.testing.assert_allclose(via_offsets.origin, via_points.origin, atol=1e-12)


class TestRasterize:
    """Tests for rasterize()."""

    def test_horizontal_line(self):
        """Test a one-pixel line covers exactly its pixels."""
        raster = rasterize([AbsPoint(2, 3, 1), AbsPoint(6, 3, 0)], (8, 8))

        assert raster.pixels.dtype == np.uint8
        assert raster.pixels.sum() == 5
        assert raster.pixels[3, 2:7].tolist() == [1] * 5
        assert not raster.clamped

    def test_strokes_are_not_joined(self):
        """Test a pen lift leaves a gap."""
        raster = rasterize([AbsPoint(0, 0, 1), AbsPoint(2, 0, 0), AbsPoint(5, 0, 1), AbsPoint(7, 0, 0)], (4, 8))

        assert raster.pixels[0].tolist() == [1, 1, 1, 0, 0, 1, 1, 1]

    def test_out_of_canvas_points_are_clamped(self):
        """Test points beyond the border are clamped and reported."""
        raster = rasterize([AbsPoint(-5, 2, 1), AbsPoint(20, 2, 0)], (4, 8))

        assert raster.clamped
        assert raster.pixels[2].tolist() == [1] * 8


class TestSequenceHelpers:
    """Tests for padding, offset scale and NDJSON I/O."""

    def test_pad_and_mask(self, square_sketch):
        """Test padding is zero and the mask marks the real rows."""
        seq = absolute_to_offsets(square_sketch)

        padded, mask = pad_and_mask(seq, 8)

        assert padded.shape == (8, 5)
        assert mask.tolist() == [1, 1, 1, 1, 1, 0, 0, 0]
        assert not padded[5:].any()

    def test_pad_too_long(self, square_sketch):
        """Test sequences longer than T_max are refused."""
        with pytest.raises(SequenceTooLong):
            pad_and_mask(absolute_to_offsets(square_sketch), 4)

    def test_offset_scale_excludes_end_rows(self):
        """Test the scale is the population std of dx and dy, end rows excluded."""
        seq = absolute_to_offsets([AbsPoint(0, 0, 1), AbsPoint(2, 0, 0), AbsPoint(2, 2, 0)])

        assert compute_offset_scale([seq]) == pytest.approx(1.0)

    def test_offset_scale_ignores_stored_scale(self):
        """Test already-normalized sequences contribute raw pixel offsets."""
        points = [AbsPoint(0, 0, 1), AbsPoint(2, 0, 0), AbsPoint(2, 2, 0)]

        assert compute_offset_scale([absolute_to_offsets(points, 4.0)]) == pytest.approx(1.0)

    def test_degenerate_offsets(self):
        """Test zero spread and empty datasets raise."""
        with pytest.raises(DegenerateDataset):
            compute_offset_scale([absolute_to_offsets([AbsPoint(1, 1, 1)])])
        with pytest.raises(DegenerateDataset):
            compute_offset_scale([])

    def test_ndjson_file(self, tmp_path, square_sketch):
        """Test records are written one JSON object per line, stroke by stroke."""
        path = tmp_path / "sketches.ndjson"
        sketch = square_sketch + [AbsPoint(40.0, 40.0, 1), AbsPoint(45.0, 40.0, 0)]

        write_ndjson(path, [SketchRecord((64, 64), sketch)])

        lines = path.read_text().splitlines()
        assert len(lines) == 1
        data = json.loads(lines[0])
        assert data["canvas"] == [64, 64]
        assert len(data["strokes"]) == 2
        assert read_ndjson(path)[0].points == sketch

    def test_ndjson_rejects_short_and_malformed_records(self, tmp_path):
        """Test one-point sketches and invalid JSON lines are reported with their line."""
        short = tmp_path / "short.ndjson"
        short.write_text('{"canvas": [8, 8], "strokes": [[[1, 1]]]}\n')
        broken = tmp_path / "broken.ndjson"
        broken.write_text('{"canvas": [8, 8], "strokes": [[[1, 1], [2, 2]]]}\n{oops\n')

        with pytest.raises(InvalidSketch):
            read_ndjson(short)
        with pytest.raises(FileSystemError, match="Line: 2"):
            read_ndjson(broken)

    def test_split_strokes(self, square_sketch):
        """Test grouping at stroke starts."""
        assert len(split_strokes(square_sketch)) == 1

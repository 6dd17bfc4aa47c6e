import numpy as np
import pytest

from flowseg.flow_io import (BadMagic, FlowField, FlowVolume, NonFinite,
                             Truncated, flow_to_hsv, normalize_coords,
                             read_flo, resample, write_flo)


def make_field(u, v):
    return FlowField(np.asarray(u, dtype=np.float32),
                     np.asarray(v, dtype=np.float32))


class TestFloFormat:
    def test_minimal_zero_field(self, tmp_path):
        path = tmp_path / "z.flo"
        write_flo(make_field([[0.0]], [[0.0]]), path)
        f = read_flo(path)
        assert f.width == 1 and f.height == 1
        assert f.u[0, 0] == 0.0 and f.v[0, 0] == 0.0

    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(7)
        field = make_field(rng.standard_normal((5, 3)) * 100,
                           rng.standard_normal((5, 3)) * 100)
        path = tmp_path / "r.flo"
        write_flo(field, path)
        back = read_flo(path)
        assert np.array_equal(back.u, field.u)
        assert np.array_equal(back.v, field.v)

    def test_2x2_file_is_40_bytes(self, tmp_path):
        path = tmp_path / "s.flo"
        write_flo(make_field(np.zeros((2, 2)), np.zeros((2, 2))), path)
        assert path.stat().st_size == 12 + 8 * 2 * 2  # header + payload

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.flo"
        import struct
        path.write_bytes(struct.pack("<fii", 0.0, 1, 1) + b"\x00" * 8)
        with pytest.raises(BadMagic):
            read_flo(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "short.flo"
        import struct
        path.write_bytes(struct.pack("<fii", 202021.25, 4, 4) + b"\x00" * 10)
        with pytest.raises(Truncated):
            read_flo(path)

    def test_non_finite_rejected(self, tmp_path):
        path = tmp_path / "nan.flo"
        import struct
        payload = np.array([np.nan, 0.0], dtype="<f4").tobytes()
        path.write_bytes(struct.pack("<fii", 202021.25, 1, 1) + payload)
        with pytest.raises(NonFinite):
            read_flo(path)

    def test_unwritable_path(self, tmp_path):
        with pytest.raises(OSError):
            write_flo(make_field([[1.0]], [[2.0]]), tmp_path / "no" / "dir" / "x.flo")


class TestFieldInvariants:
    def test_nan_rejected_at_construction(self):
        with pytest.raises(NonFinite):
            make_field([[np.nan]], [[0.0]])

    def test_volume_needs_two_frames(self):
        f = make_field([[1.0]], [[0.0]])
        with pytest.raises(ValueError):
            FlowVolume([f])

    def test_volume_uniform_dims(self):
        a = make_field(np.zeros((2, 2)), np.zeros((2, 2)))
        b = make_field(np.zeros((3, 2)), np.zeros((3, 2)))
        with pytest.raises(ValueError):
            FlowVolume([a, b])


class TestResample:
    def test_identity(self):
        rng = np.random.default_rng(1)
        f = make_field(rng.standard_normal((4, 6)), rng.standard_normal((4, 6)))
        g = resample(f, 6, 4)
        assert np.array_equal(g.u, f.u) and np.array_equal(g.v, f.v)

    def test_constant_field_rescaled(self):
        f = make_field(np.full((8, 8), 4.0), np.full((8, 8), 2.0))
        g = resample(f, 4, 4)
        assert np.allclose(g.u, 2.0) and np.allclose(g.v, 1.0)

    def test_bilinear_midpoints_on_2x2(self):
        # upsample 2x2 -> 3x3: the new center row/col are plain averages,
        # then everything is scaled by 3/2 per axis
        u = np.array([[0.0, 2.0], [4.0, 6.0]])
        f = make_field(u, np.zeros((2, 2)))
        g = resample(f, 3, 3)
        expected = np.array([[0.0, 1.0, 2.0],
                             [2.0, 3.0, 4.0],
                             [4.0, 5.0, 6.0]]) * 1.5
        assert np.allclose(g.u, expected)

    def test_bad_target(self):
        f = make_field(np.zeros((2, 2)), np.zeros((2, 2)))
        with pytest.raises(ValueError):
            resample(f, 0, 2)


class TestNormalizeCoords:
    def test_origin_maps_to_minus_one(self):
        assert normalize_coords(0, 0, 1, 10, 7, 9) == (-1.0, -1.0, -1.0)

    def test_endpoints_map_to_plus_one(self):
        x, y, t = normalize_coords(9, 6, 9, 10, 7, 9)
        assert (x, y, t) == (1.0, 1.0, 1.0)

    def test_center_of_odd_grid(self):
        x, y, _ = normalize_coords(2, 3, 1, 5, 7, 2)
        assert x == 0.0 and y == 0.0

    def test_given_point(self):
        x, _, _ = normalize_coords(3, 0, 1, 5, 1, 2)
        assert x == 0.5

    def test_degenerate_axis_maps_to_zero(self):
        x, y, t = normalize_coords(0, 0, 1, 1, 1, 1)
        assert (x, y, t) == (0.0, 0.0, 0.0)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            normalize_coords(5, 0, 1, 5, 5, 2)
        with pytest.raises(ValueError):
            normalize_coords(0, 0, 0, 5, 5, 2)

    def test_affine_monotone(self):
        xs = [normalize_coords(x, 0, 1, 11, 2, 2)[0] for x in range(11)]
        diffs = np.diff(xs)
        assert np.all(diffs > 0)
        assert np.allclose(diffs, diffs[0])


class TestHsv:
    def test_zero_flow_is_white(self):
        img = flow_to_hsv(make_field(np.zeros((4, 4)), np.zeros((4, 4))))
        assert np.all(img == 255)

    def test_constant_flow_uniform_hue(self):
        img = flow_to_hsv(make_field(np.full((4, 4), 3.0), np.zeros((4, 4))))
        assert np.all(img == img[0, 0])

    def test_opposite_halves_complementary_equal_brightness(self):
        u = np.concatenate([np.full((4, 2), 5.0), np.full((4, 2), -5.0)], axis=1)
        img = flow_to_hsv(make_field(u, np.zeros((4, 4)))).astype(int)
        left, right = img[0, 0], img[0, -1]
        assert not np.array_equal(left, right)
        # complementary hues at full saturation sum to white channel-wise
        assert np.all(np.abs(left + right - 255) <= 1)
        assert abs(left.max() - right.max()) <= 1

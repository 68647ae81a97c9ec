import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smearscreen.errors import ImageFormatError, ValidationError
from smearscreen.imagecore import (
    FloatPlane,
    Raster,
    gaussian_blur,
    gaussian_kernel_1d,
    load_raster,
    save_float_plane,
    save_raster,
    tile_grid,
    to_float,
    to_raster,
)


class TestRasterIO:
    def test_minimal_pgm(self, tmp_path):
        path = tmp_path / "one.pgm"
        path.write_bytes(b"P5\n1 1\n255\n\x00")
        r = load_raster(path)
        assert (r.width, r.height, r.depth) == (1, 1, 8)
        assert r.pixels.tolist() == [[0]]

    def test_pgm_comments_and_whitespace(self, tmp_path):
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P5\n# a comment\n2 1\n# more\n255\n\x07\x09")
        r = load_raster(path)
        assert r.pixels.tolist() == [[7, 9]]

    def test_pgm_16bit_big_endian(self, tmp_path):
        path = tmp_path / "w.pgm"
        path.write_bytes(b"P5\n1 1\n65535\n\x01\x02")
        r = load_raster(path)
        assert r.depth == 16
        assert r.pixels[0, 0] == 0x0102

    @pytest.mark.parametrize("ext", ["pgm", "png"])
    def test_roundtrip_16bit(self, tmp_path, rng, ext):
        pixels = rng.integers(0, 65536, size=(64, 64)).astype(np.uint16)
        raster = Raster(64, 64, 16, pixels)
        path = tmp_path / f"rt.{ext}"
        save_raster(raster, path)
        back = load_raster(path)
        assert back.depth == 16
        assert np.array_equal(back.pixels, pixels)

    @pytest.mark.parametrize("ext", ["pgm", "png"])
    def test_roundtrip_8bit(self, tmp_path, rng, ext):
        pixels = rng.integers(0, 256, size=(16, 9)).astype(np.uint8)
        path = tmp_path / f"rt8.{ext}"
        save_raster(Raster(9, 16, 8, pixels), path)
        back = load_raster(path)
        assert back.depth == 8
        assert np.array_equal(back.pixels, pixels)

    def test_full_size_16bit_png(self, tmp_path):
        # the native capture format: 2456x2054 at 16 bits
        pixels = np.zeros((2054, 2456), dtype=np.uint16)
        pixels[0, 0] = 65535
        path = tmp_path / "cap.png"
        save_raster(Raster(2456, 2054, 16, pixels), path)
        r = load_raster(path)
        assert (r.width, r.height, r.depth) == (2456, 2054, 16)

    def test_color_png_rejected(self, tmp_path):
        from PIL import Image

        path = tmp_path / "color.png"
        Image.new("RGB", (4, 4), (200, 10, 10)).save(path)
        with pytest.raises(ImageFormatError):
            load_raster(path)

    def test_paletted_png_rejected(self, tmp_path):
        from PIL import Image

        path = tmp_path / "pal.png"
        Image.new("RGB", (4, 4), (1, 2, 3)).convert("P").save(path)
        with pytest.raises(ImageFormatError):
            load_raster(path)

    def test_color_ppm_rejected(self, tmp_path):
        path = tmp_path / "c.ppm"
        path.write_bytes(b"P6\n1 1\n255\n\x00\x01\x02")
        with pytest.raises(ImageFormatError):
            load_raster(path)

    def test_unsupported_maxval(self, tmp_path):
        path = tmp_path / "m.pgm"
        path.write_bytes(b"P5\n1 1\n1023\n\x00\x01")
        with pytest.raises(ImageFormatError):
            load_raster(path)

    def test_truncated_pgm(self, tmp_path):
        path = tmp_path / "t.pgm"
        path.write_bytes(b"P5\n4 4\n255\n\x00\x01")
        with pytest.raises(ImageFormatError):
            load_raster(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ImageFormatError):
            load_raster(tmp_path / "nope.pgm")

    def test_save_float_plane_sidecar(self, tmp_path):
        plane = FloatPlane(np.array([[-1.0, 3.0], [0.0, 1.0]]))
        path = tmp_path / "f.pgm"
        lo, hi = save_float_plane(plane, path)
        assert (lo, hi) == (-1.0, 3.0)
        sidecar = (tmp_path / "f.pgm.range.txt").read_text()
        assert "min=-1.0" in sidecar and "max=3.0" in sidecar
        back = load_raster(path)
        assert back.pixels[0, 1] == 65535  # max maps to full scale


class TestToFloat:
    def test_full_scale_16bit(self):
        r = Raster(1, 1, 16, np.array([[65535]], dtype=np.uint16))
        assert to_float(r).values[0, 0] == 1.0

    def test_zero_8bit(self):
        r = Raster(1, 1, 8, np.array([[0]], dtype=np.uint8))
        assert to_float(r).values[0, 0] == 0.0

    def test_midpoint_16bit(self):
        r = Raster(1, 1, 16, np.array([[32768]], dtype=np.uint16))
        assert to_float(r).values[0, 0] == pytest.approx(32768 / 65535, abs=1e-12)

    @given(a=st.integers(0, 65535), b=st.integers(0, 65535))
    def test_monotone(self, a, b):
        r = Raster(2, 1, 16, np.array([[a, b]], dtype=np.uint16))
        fa, fb = to_float(r).values[0]
        assert (a <= b) == (fa <= fb)

    def test_quantize_roundtrip(self, rng):
        pixels = rng.integers(0, 65536, size=(8, 8)).astype(np.uint16)
        raster = Raster(8, 8, 16, pixels)
        again = to_raster(to_float(raster), depth=16)
        assert np.array_equal(again.pixels, pixels)


class TestGaussianBlur:
    def test_constant_invariance(self):
        plane = FloatPlane(np.full((12, 12), 0.7))
        for sigma in (0.5, 1.0, 3.0):
            out = gaussian_blur(plane, sigma)
            assert np.allclose(out.values, 0.7, atol=1e-12)

    def test_impulse_equals_kernel_outer_product(self):
        values = np.zeros((9, 9))
        values[4, 4] = 1.0
        out = gaussian_blur(FloatPlane(values), 1.0)
        k = gaussian_kernel_1d(1.0)
        expected = np.zeros((9, 9))
        expected[1:8, 1:8] = np.outer(k, k)
        assert np.allclose(out.values, expected, atol=1e-12)

    def test_mass_conservation(self, rng):
        values = rng.random((32, 32))
        out = gaussian_blur(FloatPlane(values), 2.0)
        assert out.values.sum() == pytest.approx(values.sum(), abs=1e-9)

    def test_linearity(self, rng):
        p = rng.random((16, 16))
        q = rng.random((16, 16))
        a, b = 2.5, -0.75
        lhs = gaussian_blur(FloatPlane(a * p + b * q), 1.5).values
        rhs = a * gaussian_blur(FloatPlane(p), 1.5).values + b * gaussian_blur(FloatPlane(q), 1.5).values
        assert np.allclose(lhs, rhs, atol=1e-9)

    def test_commutes_with_rotation(self, rng):
        p = rng.random((20, 20))
        blurred_then_rotated = np.rot90(gaussian_blur(FloatPlane(p), 1.3).values)
        rotated_then_blurred = gaussian_blur(FloatPlane(np.rot90(p).copy()), 1.3).values
        assert np.allclose(blurred_then_rotated, rotated_then_blurred, atol=1e-9)

    def test_output_shape_matches_input(self, rng):
        p = rng.random((13, 29))
        out = gaussian_blur(FloatPlane(p), 4.0)
        assert out.values.shape == (13, 29)

    @pytest.mark.parametrize("sigma", [0.0, -1.0, float("nan"), float("inf")])
    def test_bad_sigma(self, sigma):
        with pytest.raises(ValidationError):
            gaussian_blur(FloatPlane(np.zeros((4, 4))), sigma)


class TestTileGrid:
    def test_capture_resolution_tile_count(self):
        plane = FloatPlane(np.zeros((2054, 2456)))
        tiles = tile_grid(plane, 71, 71)
        assert len(tiles) == 34 * 28 == 952

    def test_exact_fit_single_tile(self):
        tiles = tile_grid(FloatPlane(np.zeros((71, 71))), 71, 71)
        assert len(tiles) == 1
        assert tiles[0].origin == (0, 0)

    def test_too_small_plane(self):
        with pytest.raises(ValidationError):
            tile_grid(FloatPlane(np.zeros((70, 70))), 71)

    def test_row_major_order_and_origins(self):
        plane = FloatPlane(np.arange(8 * 10, dtype=float).reshape(8, 10))
        tiles = tile_grid(plane, 4, 3)
        origins = [t.origin for t in tiles]
        assert origins == [(0, 0), (3, 0), (6, 0), (0, 3), (3, 3), (6, 3)]

    @settings(deadline=None, max_examples=25)
    @given(
        h=st.integers(5, 24),
        w=st.integers(5, 24),
        size=st.integers(2, 5),
        stride=st.integers(1, 6),
        seed=st.integers(0, 2**16),
    )
    def test_tiles_reread_identically(self, h, w, size, stride, seed):
        if size > min(h, w):
            return
        values = np.random.default_rng(seed).random((h, w))
        for tile in tile_grid(FloatPlane(values), size, stride):
            x, y = tile.origin
            assert np.array_equal(tile.plane.values, values[y : y + size, x : x + size])

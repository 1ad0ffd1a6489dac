"""PPM/PGM image files and the procedural shape dataset."""

import hashlib

import numpy as np
import pytest

from markov_scale_gen.dataset import (
    NUM_CLASSES,
    SIDE,
    generate_dataset,
    load_dataset,
    make_image,
)
from markov_scale_gen.ppm import read_image, write_pgm, write_ppm


class TestPpmPgm:
    def test_ppm_round_trip_on_grid_values(self, tmp_path):
        # bytes map to a 255-level grid; values already on it survive exactly
        p = tmp_path / "x.ppm"
        raw = np.arange(48, dtype=np.uint8).reshape(4, 4, 3)
        img = raw.astype(np.float64) / 255.0 * 2.0 - 1.0
        write_ppm(p, img)
        back = read_image(p)
        assert back.shape == (4, 4, 3)
        assert np.allclose(back, img, atol=0)

    def test_pgm_round_trip(self, tmp_path):
        p = tmp_path / "x.pgm"
        img = np.linspace(-1, 1, 255 * 2 + 1)[: 6 * 7].reshape(6, 7)
        write_pgm(p, img)
        back = read_image(p)
        assert back.shape == (6, 7)
        assert np.abs(back - img).max() <= 1.0 / 255.0

    def test_quantization_error_bounded(self, tmp_path):
        p = tmp_path / "x.ppm"
        rng = np.random.default_rng(1)
        img = rng.uniform(-1, 1, size=(8, 8, 3))
        write_ppm(p, img)
        assert np.abs(read_image(p) - img).max() <= 1.0 / 255.0

    def test_out_of_range_clipped(self, tmp_path):
        p = tmp_path / "x.pgm"
        write_pgm(p, np.array([[-5.0, 5.0]]))
        assert np.array_equal(read_image(p), np.array([[-1.0, 1.0]]))

    def test_write_is_deterministic(self, tmp_path):
        img = np.random.default_rng(2).uniform(-1, 1, size=(5, 5, 3))
        a, b = tmp_path / "a.ppm", tmp_path / "b.ppm"
        write_ppm(a, img)
        write_ppm(b, img.copy())
        assert a.read_bytes() == b.read_bytes()

    def test_header_comments_skipped(self, tmp_path):
        p = tmp_path / "c.pgm"
        p.write_bytes(b"P5 # magic\n# a comment line\n2 1 # size\n255\n\x00\xff")
        assert np.array_equal(read_image(p), np.array([[-1.0, 1.0]]))

    def test_rejects_wrong_shapes(self, tmp_path):
        with pytest.raises(ValueError):
            write_ppm(tmp_path / "x.ppm", np.zeros((4, 4)))
        with pytest.raises(ValueError):
            write_pgm(tmp_path / "x.pgm", np.zeros((4, 4, 3)))

    def test_rejects_bad_magic_and_maxval(self, tmp_path):
        bad_magic = tmp_path / "a.pgm"
        bad_magic.write_bytes(b"P2\n1 1\n255\n0")
        with pytest.raises(ValueError, match="magic"):
            read_image(bad_magic)
        deep = tmp_path / "b.pgm"
        deep.write_bytes(b"P5\n1 1\n65535\n\x00\x00")
        with pytest.raises(ValueError, match="maxval"):
            read_image(deep)

    def test_rejects_truncation(self, tmp_path):
        short = tmp_path / "t.ppm"
        short.write_bytes(b"P6\n2 2\n255\n\x00\x01")
        with pytest.raises(ValueError, match="truncated"):
            read_image(short)
        header_only = tmp_path / "h.ppm"
        header_only.write_bytes(b"P6\n2")
        with pytest.raises(ValueError, match="truncated"):
            read_image(header_only)


class TestMakeImage:
    def test_shape_range_dtype(self):
        img = make_image(0, np.random.default_rng(0))
        assert img.shape == (SIDE, SIDE, 3)
        assert img.min() >= -1.0 and img.max() <= 1.0

    def test_classes_differ_in_expectation(self):
        # red square vs blue square: channel means must separate
        rng = np.random.default_rng(0)
        red = make_image(0, rng)
        blue = make_image(1, rng)
        assert red[..., 0].mean() > blue[..., 0].mean()
        assert blue[..., 2].mean() > red[..., 2].mean()

    def test_within_class_jitter(self):
        rng = np.random.default_rng(0)
        a = make_image(3, rng)
        b = make_image(3, rng)
        assert not np.array_equal(a, b)

    def test_rejects_bad_class(self):
        with pytest.raises(ValueError):
            make_image(NUM_CLASSES, np.random.default_rng(0))
        with pytest.raises(ValueError):
            make_image(-1, np.random.default_rng(0))


class TestDataset:
    def test_generate_then_load(self, tmp_path):
        index = generate_dataset(tmp_path / "d", 10, seed=3)
        assert [cls for _, cls in index] == [i % NUM_CLASSES for i in range(10)]
        images, labels = load_dataset(tmp_path / "d")
        assert images.shape == (10, SIDE, SIDE, 3)
        assert labels.tolist() == [i % NUM_CLASSES for i in range(10)]
        assert images.min() >= -1.0 and images.max() <= 1.0

    def test_generation_is_byte_deterministic(self, tmp_path):
        generate_dataset(tmp_path / "a", 4, seed=7)
        generate_dataset(tmp_path / "b", 4, seed=7)
        for name in ("img_00000.ppm", "img_00003.ppm", "labels.txt"):
            ha = hashlib.sha256((tmp_path / "a" / name).read_bytes()).hexdigest()
            hb = hashlib.sha256((tmp_path / "b" / name).read_bytes()).hexdigest()
            assert ha == hb

    def test_seed_changes_pixels(self, tmp_path):
        generate_dataset(tmp_path / "a", 1, seed=0)
        generate_dataset(tmp_path / "b", 1, seed=1)
        a = (tmp_path / "a" / "img_00000.ppm").read_bytes()
        b = (tmp_path / "b" / "img_00000.ppm").read_bytes()
        assert a != b

    def test_missing_index_raises(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path)

    def test_empty_dataset(self, tmp_path):
        generate_dataset(tmp_path / "d", 0)
        images, labels = load_dataset(tmp_path / "d")
        assert images.shape == (0, SIDE, SIDE, 3)
        assert labels.shape == (0,)

    def test_negative_count_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            generate_dataset(tmp_path / "d", -1)

"""File-format surfaces: packed datasets, PGM, directory loading."""

import struct

import numpy as np
import pytest

from gahb.dataio import (
    MAGIC, VERSION, bilinear_resize, load_image_dir, load_packed, read_pgm,
    save_packed, write_pgm,
)
from gahb.datasets import DatasetSpec, generate
from gahb.errors import DatasetError


class TestPacked:
    def test_round_trip(self, tmp_path):
        spec = DatasetSpec("disks", 8, (16, 16), seed=1)
        images, metas = generate(spec)
        path = tmp_path / "d.gahb"
        save_packed(path, images, metas, spec.to_dict())
        loaded, trailer = load_packed(path)
        np.testing.assert_array_equal(loaded, images.astype(np.float32))
        assert trailer["spec"]["kind"] == "disks"
        assert len(trailer["samples"]) == 8
        assert trailer["samples"][0]["kind"] == "disks"

    def test_header_bytes(self, tmp_path):
        images = np.zeros((3, 1, 8, 9), dtype=np.float32)
        path = tmp_path / "h.gahb"
        save_packed(path, images)
        raw = path.read_bytes()
        magic, version, n, h, w = struct.unpack_from("<4sIIII", raw, 0)
        assert magic == MAGIC == b"GAHB"
        assert version == VERSION
        assert (n, h, w) == (3, 8, 9)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.gahb"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(DatasetError, match="magic"):
            load_packed(path)

    def test_truncated_payload(self, tmp_path):
        images = np.zeros((2, 1, 8, 8), dtype=np.float32)
        path = tmp_path / "t.gahb"
        save_packed(path, images)
        path.write_bytes(path.read_bytes()[:40])
        with pytest.raises(DatasetError, match="truncated"):
            load_packed(path)

    def test_writer_determinism(self, tmp_path):
        spec = DatasetSpec("calpha", 4, (16, 16), seed=3,
                           params={"alpha": 2.0})
        images, metas = generate(spec)
        p1, p2 = tmp_path / "a.gahb", tmp_path / "b.gahb"
        save_packed(p1, images, metas, spec.to_dict())
        images2, metas2 = generate(spec)
        save_packed(p2, images2, metas2, spec.to_dict())
        assert p1.read_bytes() == p2.read_bytes()


class TestPgm:
    def test_round_trip_within_quantization(self, tmp_path):
        rng = np.random.default_rng(42)
        img = rng.random((12, 17))
        path = tmp_path / "x.pgm"
        write_pgm(path, img)
        back = read_pgm(path)
        assert back.shape == (12, 17)
        assert np.max(np.abs(back - img)) <= 1.0 / 255.0

    def test_reads_comment_headers(self, tmp_path):
        path = tmp_path / "c.pgm"
        payload = bytes(range(6))
        path.write_bytes(b"P5\n# a comment\n3 2\n255\n" + payload)
        img = read_pgm(path)
        np.testing.assert_allclose(img.ravel() * 255.0, np.arange(6), atol=1e-12)

    def test_rejects_non_pgm(self, tmp_path):
        path = tmp_path / "x.pgm"
        path.write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
        with pytest.raises(DatasetError):
            read_pgm(path)

    def test_rejects_truncated(self, tmp_path):
        path = tmp_path / "x.pgm"
        path.write_bytes(b"P5\n4 4\n255\n\x00\x00")
        with pytest.raises(DatasetError, match="truncated"):
            read_pgm(path)


class TestResize:
    def test_identity_when_same_size(self):
        rng = np.random.default_rng(0)
        img = rng.random((9, 9))
        np.testing.assert_array_equal(bilinear_resize(img, (9, 9)), img)

    def test_constant_preserved(self):
        img = np.full((16, 16), 0.37)
        np.testing.assert_allclose(bilinear_resize(img, (7, 5)), 0.37, rtol=1e-12)

    def test_downsample_shape_and_range(self):
        rng = np.random.default_rng(1)
        img = rng.random((32, 24))
        out = bilinear_resize(img, (8, 8))
        assert out.shape == (8, 8)
        assert out.min() >= img.min() - 1e-12 and out.max() <= img.max() + 1e-12


class TestImageDir:
    def test_loads_sorted_pgms(self, tmp_path):
        rng = np.random.default_rng(2)
        a, b = rng.random((16, 16)), rng.random((16, 16))
        write_pgm(tmp_path / "b.pgm", b)
        write_pgm(tmp_path / "a.pgm", a)
        images, metas = load_image_dir(tmp_path, (16, 16))
        assert [m["file"] for m in metas] == ["a.pgm", "b.pgm"]
        assert np.max(np.abs(images[0, 0] - a)) <= 1.0 / 255.0

    def test_resizes_and_grayscales_png(self, tmp_path):
        from PIL import Image
        rng = np.random.default_rng(3)
        arr = (rng.random((20, 20, 3)) * 255).astype(np.uint8)
        Image.fromarray(arr).save(tmp_path / "c.png")
        images, _ = load_image_dir(tmp_path, (10, 10))
        assert images.shape == (1, 1, 10, 10)
        np.testing.assert_allclose(
            images[0, 0],
            bilinear_resize(arr.mean(axis=2) / 255.0, (10, 10)), atol=1e-12)

    def test_unreadable_file_raises(self, tmp_path):
        (tmp_path / "junk.png").write_bytes(b"not an image")
        with pytest.raises(DatasetError, match="unreadable"):
            load_image_dir(tmp_path, (8, 8))

    def test_empty_dir_raises(self, tmp_path):
        with pytest.raises(DatasetError):
            load_image_dir(tmp_path, (8, 8))

    def test_image_dir_dataset_kind(self, tmp_path):
        write_pgm(tmp_path / "a.pgm", np.full((16, 16), 0.5))
        write_pgm(tmp_path / "b.pgm", np.full((16, 16), 0.25))
        images, metas = generate(DatasetSpec(
            "image_dir", 2, (8, 8), seed=0, params={"path": str(tmp_path)}))
        assert images.shape == (2, 1, 8, 8)

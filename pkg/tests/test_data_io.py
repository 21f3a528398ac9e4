"""Image files, resizing, manifests and splits."""

import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from PIL import Image

from mambalite.data_io import DatasetManifest, Sample, SampleBatch, load_mask, load_pair, make_split, \
    read_manifest, resize_bilinear, resize_nearest, save_image, save_mask, to_uint8


def write_pair(tmp_path, name, img, mask):
    Image.fromarray(img).save(tmp_path / f"{name}.png")
    Image.fromarray(mask).save(tmp_path / f"{name}_mask.png")
    return {"image": f"{name}.png", "mask": f"{name}_mask.png"}


class TestLoadPair:
    def test_same_size_is_scaled_only(self, rng, tmp_path):
        img = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
        mask = (rng.random((8, 8)) > 0.5).astype(np.uint8) * 255
        s = load_pair(write_pair(tmp_path, "a", img, mask), (8, 8), str(tmp_path))
        np.testing.assert_allclose(s.image, img.transpose(2, 0, 1) / 255.0, atol=1e-7)
        assert np.array_equal(s.mask[0], mask / 255)
        assert s.id == "a"

    def test_white_mask_stays_full(self, rng, tmp_path):
        e = write_pair(tmp_path, "w", np.zeros((10, 14, 3), np.uint8), np.full((10, 14), 255, np.uint8))
        assert np.all(load_pair(e, (32, 32), str(tmp_path)).mask == 1)

    def test_checkerboard_downscale_takes_bottom_right(self):
        board = (np.indices((8, 8)).sum(axis=0) % 2).astype(np.uint8)
        small = resize_nearest(board, (4, 4))
        assert np.array_equal(small, board[1::2, 1::2])

    def test_size_mismatch(self, tmp_path):
        Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(tmp_path / "x.png")
        Image.fromarray(np.zeros((4, 5), np.uint8)).save(tmp_path / "x_mask.png")
        with pytest.raises(ValueError):
            load_pair({"image": "x.png", "mask": "x_mask.png"}, None, str(tmp_path))

    def test_unreadable(self, tmp_path):
        (tmp_path / "bad.png").write_bytes(b"nope")
        with pytest.raises(OSError):
            load_pair({"image": "bad.png", "mask": "bad.png"}, None, str(tmp_path))

    def test_mask_roundtrip(self, rng, tmp_path):
        mask = (rng.random((6, 6)) > 0.5).astype(np.uint8) * 255
        s = load_pair(write_pair(tmp_path, "r", np.zeros((6, 6, 3), np.uint8), mask), None, str(tmp_path))
        save_mask(s.mask, str(tmp_path / "out.pgm"))
        assert np.array_equal(np.asarray(Image.open(tmp_path / "out.pgm")), mask)
        assert np.array_equal(load_mask(str(tmp_path / "out.pgm")), s.mask[0])


class TestResize:
    def test_bilinear_identity_and_constant(self, rng):
        a = rng.random((2, 5, 7))
        assert np.array_equal(resize_bilinear(a, (5, 7)), a)
        np.testing.assert_allclose(resize_bilinear(np.full((3, 4), 0.3), (9, 11)), 0.3, atol=1e-15)

    def test_bilinear_upscale_midpoints(self):
        a = np.array([[0.0, 1.0]])
        np.testing.assert_allclose(resize_bilinear(a, (1, 4)), [[0.0, 0.25, 0.75, 1.0]])

    @given(st.integers(1, 9), st.integers(1, 9))
    def test_nearest_keeps_values(self, h, w):
        a = np.arange(30).reshape(5, 6)
        assert set(np.unique(resize_nearest(a, (h, w)))) <= set(a.ravel())


class TestSaveMask:
    def test_values(self, tmp_path):
        save_mask(np.ones((3, 3)), str(tmp_path / "a.pgm"))
        assert np.all(np.asarray(Image.open(tmp_path / "a.pgm")) == 255)
        save_mask(np.full((1, 2, 2), 0.5), str(tmp_path / "p.pgm"), as_probability=True)
        assert np.all(np.asarray(Image.open(tmp_path / "p.pgm")) == 128)
        assert to_uint8(np.array([0.0, 1 / 255, 0.998])).tolist() == [0, 1, 254]

    def test_range(self, tmp_path):
        with pytest.raises(ValueError):
            save_mask(np.full((2, 2), 1.5), str(tmp_path / "x.pgm"), as_probability=True)

    def test_image_roundtrip(self, rng, tmp_path):
        img = rng.integers(0, 256, (3, 4, 5)).astype(np.float64) / 255
        save_image(img, str(tmp_path / "i.ppm"))
        np.testing.assert_array_equal(np.asarray(Image.open(tmp_path / "i.ppm")).transpose(2, 0, 1) / 255, img)


class TestSplit:
    def test_ratio_sizes(self):
        s = make_split([f"i{k}" for k in range(10)])
        assert [len(s[k]) for k in ("train", "val", "test")] == [7, 1, 2]
        assert make_split(list("abcd"), (1, 0, 0))["train"] == make_split(list("abcd"), (1, 0, 0))["train"]
        assert len(make_split(list("abcd"), (1, 0, 0))["train"]) == 4

    @given(st.integers(0, 60), st.integers(0, 1000))
    def test_partition(self, n, seed):
        ids = [f"id{k}" for k in range(n)]
        s = make_split(ids, seed=seed)
        joined = s["train"] + s["val"] + s["test"]
        assert sorted(joined) == sorted(ids)
        assert s == make_split(ids, seed=seed)

    def test_bad_ratios(self):
        with pytest.raises(ValueError):
            make_split(["a"], (0.5, 0.5, 0.5))


class TestManifest:
    def test_roundtrip_and_load(self, rng, tmp_path):
        entries = []
        for i, split in enumerate(("train", "val", "test")):
            e = write_pair(tmp_path, f"s{i}", rng.integers(0, 256, (16, 16, 3), dtype=np.uint8),
                           np.full((16, 16), 255, np.uint8))
            e["split"] = split
            entries.append(e)
        path = str(tmp_path / "manifest.json")
        DatasetManifest(entries, ".", (32, 32)).save(path)
        m = read_manifest(path)
        samples = m.load("train")
        assert len(samples) == 1 and samples[0].image.shape == (3, 32, 32)

    def test_id_in_two_splits(self, tmp_path):
        entries = [{"image": "a.png", "mask": "am.png", "split": "train"},
                   {"image": "a.png", "mask": "am.png", "split": "test"}]
        with pytest.raises(ValueError):
            DatasetManifest(entries).validate(check_files=False)

    def test_missing_file(self, tmp_path):
        (tmp_path / "m.json").write_text(json.dumps(
            {"entries": [{"image": "none.png", "mask": "none_m.png", "split": "train"}]}))
        with pytest.raises(FileNotFoundError):
            read_manifest(str(tmp_path / "m.json"))

    def test_batch_rejects_soft_masks(self):
        s = Sample("a", np.zeros((3, 2, 2)), np.full((1, 2, 2), 0.5))
        with pytest.raises(ValueError):
            SampleBatch.from_samples([s])

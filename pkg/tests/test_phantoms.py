"""Tests for phantom generation and dataset manifests."""

from collections import Counter

import numpy as np
import pytest


class TestPhantom:

    def test_deterministic_for_seed(self):
        from utils.phantoms import PhantomConfig, make_phantom

        a = make_phantom(PhantomConfig(tumor=True, seed=7))
        b = make_phantom(PhantomConfig(tumor=True, seed=7))

        np.testing.assert_array_equal(a.pixels, b.pixels)
        assert a.boxes == b.boxes

    def test_normal_has_no_box(self):
        from utils.phantoms import PhantomConfig, make_phantom

        sample = make_phantom(PhantomConfig(seed=3))
        assert sample.boxes == []
        assert sample.pixels.shape == (1, 80, 64)

    def test_tumor_only_changes_its_box(self):
        from utils.phantoms import PhantomConfig, make_phantom

        tumor = make_phantom(PhantomConfig(tumor=True, seed=11))
        normal = make_phantom(PhantomConfig(tumor=False, seed=11))
        (box,) = tumor.boxes
        diff = tumor.image() - normal.image()

        rows, cols = box.pixel_slices()
        outside = np.ones_like(diff, dtype=bool)
        outside[rows, cols] = False
        assert np.all(diff[outside] == 0.0)
        assert diff[rows, cols].max() > 0.2
        assert box.within(80, 64)

    def test_tumor_inside_foreground(self):
        from utils.phantoms import BACKGROUND_LEVEL, PhantomConfig, make_phantom

        config = PhantomConfig(tumor=True, seed=5)
        (box,) = make_phantom(config).boxes
        # same seed without lesion or texture: the foreground is everything above background
        twin = make_phantom(config.model_copy(update={"tumor": False, "texture_amplitude": 0.0}))
        rows, cols = box.pixel_slices()
        assert (twin.pixels[0][rows, cols] > BACKGROUND_LEVEL).all()

    def test_oversized_tumor_rejected(self):
        from pydantic import ValidationError

        from utils.phantoms import PhantomConfig

        with pytest.raises(ValidationError):
            PhantomConfig(size=(20, 16), tumor_radius=(3.0, 6.0))


class TestSplits:

    def test_counts(self):
        from utils.phantoms import split_counts

        assert split_counts(10, (0.6, 0.2, 0.2)) == {"train": 6, "val": 2, "test": 2}
        assert split_counts(7, (0.6, 0.2, 0.2)) == {"train": 5, "val": 1, "test": 1}

    def test_fractions_must_sum_to_one(self):
        from utils.phantoms import split_counts

        with pytest.raises(ValueError):
            split_counts(10, (0.5, 0.2, 0.2))


class TestDataset:

    def _make(self, out_dir, seed=0):
        from utils.phantoms import make_dataset

        return make_dataset(10, 10, (0.6, 0.2, 0.2), seed, out_dir, workers=2)

    def test_manifest_per_group_splits(self, tmp_path):
        records = self._make(tmp_path)

        for group in ("tumor", "normal"):
            counts = Counter(r["split"] for r in records if r["id"].startswith(group))
            assert counts == {"train": 6, "val": 2, "test": 2}
        assert all(len(r["boxes"]) == 1 for r in records if r["id"].startswith("tumor"))
        assert all(r["boxes"] == [] for r in records if r["id"].startswith("normal"))
        assert (tmp_path / "manifest.jsonl").exists()

    def test_same_seed_same_bytes(self, tmp_path):
        first = self._make(tmp_path / "a")
        second = self._make(tmp_path / "b")

        assert first == second
        for record in first[:4]:
            assert (tmp_path / "a" / record["path"]).read_bytes() == (tmp_path / "b" / record["path"]).read_bytes()

    def test_load_split(self, tmp_path):
        from utils.phantoms import load_dataset

        self._make(tmp_path)
        val = load_dataset(tmp_path / "manifest.jsonl", split="val")

        assert len(val) == 4
        assert sum(s.is_tumor for s in val) == 2

    def test_missing_image(self, tmp_path):
        from core.exceptions import ManifestError
        from utils.phantoms import load_dataset

        records = self._make(tmp_path)
        (tmp_path / records[0]["path"]).unlink()
        with pytest.raises(ManifestError) as exc:
            load_dataset(tmp_path / "manifest.jsonl")
        assert exc.value.error_code == "MISSING_IMAGE"

    def test_duplicate_id(self, tmp_path):
        from core.exceptions import ManifestError
        from utils.persistence import write_jsonl
        from utils.phantoms import load_dataset

        records = self._make(tmp_path)
        write_jsonl(tmp_path / "manifest.jsonl", [records[0], records[0]])
        with pytest.raises(ManifestError) as exc:
            load_dataset(tmp_path / "manifest.jsonl")
        assert exc.value.error_code == "DUPLICATE_ID"

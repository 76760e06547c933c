"""Tests for pairing, progressive translation and merging."""

import numpy as np
import pytest


def blob_image(cols, shape=(16, 12), level=0.8, background=0.1):
    image = np.full(shape, background)
    image[:, cols] = level
    return image


def normal(sample_id, cols, split="train"):
    from core.samples import ImageSample

    return ImageSample(id=sample_id, pixels=blob_image(cols)[None], split=split)


def tumor(sample_id, box=(2, 3, 3, 4), split="train"):
    from core.boxes import BBox
    from core.samples import ImageSample

    image = blob_image(slice(0, 8))
    bbox = BBox(*box)
    rows, cols = bbox.pixel_slices()
    image[rows, cols] = 1.0
    return ImageSample(id=sample_id, pixels=image[None], boxes=[bbox], split=split)


def small_model(seed=0):
    from core.autoencoder import AEConfig, AEModel

    return AEModel(
        AEConfig(encoder_channels=[4, 8, 8], decoder_channels=[8, 4], init="glorot"), np.random.default_rng(seed)
    )


class TestLambdaSchedule:

    def test_linear(self):
        from core.translator import LambdaSchedule

        schedule = LambdaSchedule.linear(0.6)
        assert schedule.per_layer == pytest.approx((0.1, 0.2, 0.3, 0.4, 0.5, 0.6))
        assert schedule.per_layer[-1] == 0.6
        assert len(schedule) == 6

    def test_zero_schedule(self):
        from core.translator import LambdaSchedule

        assert LambdaSchedule.linear(0.0).per_layer == (0.0,) * 6

    @pytest.mark.parametrize(
        "lambda_max,per_layer",
        [(0.6, (0.1, 0.1, 0.6)), (1.0, (0.5, 1.0)), (0.6, (0.1, 0.5)), (0.0, (0.0, 0.1))],
    )
    def test_rejected(self, lambda_max, per_layer):
        from core.translator import LambdaSchedule

        with pytest.raises(ValueError):
            LambdaSchedule(lambda_max, per_layer)


class TestPairing:

    def test_contained_box_is_not_overlap(self):
        from core.rng import make_rng
        from core.translator import pair_images

        pool = [normal("narrow", slice(9, 12)), normal("wide", slice(0, 8))]
        pair = pair_images(tumor("t"), pool, make_rng(0))

        assert pair.normal.id == "wide"
        assert not pair.overlap
        assert pair.overlap_boundary is None

    def test_partial_coverage_falls_back_to_overlap(self):
        from core.rng import make_rng
        from core.translator import pair_images

        pool = [normal("half", slice(0, 4)), normal("sliver", slice(0, 3))]
        pair = pair_images(tumor("t", box=(2, 3, 3, 4)), pool, make_rng(0))

        assert pair.normal.id == "half"
        assert pair.overlap
        assert pair.coverage == pytest.approx(2 / 3)
        assert pair.overlap_boundary.shape == (16, 12)

    def test_top_left_gap_is_not_overlap(self):
        from core.rng import make_rng
        from core.samples import ImageSample
        from core.translator import exits_right_or_bottom, pair_images

        # box (2, 3, 3, 4) covers cols 2-4, rows 3-6; only (3, 2) and (4, 2) fall off the outline
        image = blob_image(slice(3, 9))
        image[5:, 2] = 0.8
        gap = ImageSample(id="gap", pixels=image[None])
        pair = pair_images(tumor("t"), [gap], make_rng(0))

        assert not pair.overlap
        assert pair.coverage == pytest.approx(10 / 12)
        assert pair.overlap_boundary is None
        assert not exits_right_or_bottom(pair.bbox, image > 0.5)

    def test_bottom_gap_is_overlap(self):
        from core.rng import make_rng
        from core.samples import ImageSample
        from core.translator import pair_images

        image = blob_image(slice(0, 8))
        image[6:, 4] = 0.1
        pair = pair_images(tumor("t"), [ImageSample(id="gap", pixels=image[None])], make_rng(0))

        assert pair.overlap
        assert pair.coverage == pytest.approx(11 / 12)
        assert pair.overlap_boundary is not None

    def test_no_pair(self):
        from core.exceptions import NoPairError
        from core.rng import make_rng
        from core.translator import pair_images

        with pytest.raises(NoPairError) as exc:
            pair_images(tumor("t"), [normal("far", slice(9, 12))], make_rng(0))
        assert exc.value.error_code == "NO_PAIR"

    def test_exclusion_empties_pool(self):
        from core.exceptions import NoPairError
        from core.rng import make_rng
        from core.translator import pair_images

        with pytest.raises(NoPairError) as exc:
            pair_images(tumor("t"), [normal("wide", slice(0, 8))], make_rng(0), exclude=["wide"])
        assert exc.value.error_code == "POOL_EMPTY"


class TestTranslation:

    def test_zero_lambda_is_reconstruction(self):
        from core.translator import LambdaSchedule, PairedSample, progressive_translate

        model = small_model()
        n, t = normal("n", slice(0, 8)), tumor("t")
        mixed = progressive_translate(model, PairedSample(n, t, t.boxes[0], False), LambdaSchedule.linear(0.0))
        recon, _ = model.forward(n.tensor())

        np.testing.assert_array_equal(mixed.data, recon.data)

    def test_translation_moves_towards_tumor(self):
        from core.translator import LambdaSchedule, PairedSample, progressive_translate

        model = small_model()
        n, t = normal("n", slice(0, 8)), tumor("t")
        pair = PairedSample(n, t, t.boxes[0], False)
        plain = progressive_translate(model, pair, LambdaSchedule.linear(0.0))
        _, tumor_stack = model.forward(t.tensor())
        mixed = progressive_translate(model, pair, LambdaSchedule.linear(0.6))

        assert np.abs(mixed.data - tumor_stack[5].data).mean() < np.abs(plain.data - tumor_stack[5].data).mean()

    def test_merge_keeps_zero_mask_pixels(self):
        from core.masks import MaskSpec
        from core.translator import LambdaSchedule, PairedSample, translate_pair

        n, t = normal("n", slice(0, 8)), tumor("t")
        pair = PairedSample(n, t, t.boxes[0], False)
        out = translate_pair(small_model(), pair, LambdaSchedule.linear(0.6), MaskSpec(M=2, N=2, reference_side=None), "x")

        rows, cols = t.boxes[0].pixel_slices()
        untouched = np.ones((16, 12), dtype=bool)
        untouched[max(rows.start - 1, 0):rows.stop + 1, max(cols.start - 1, 0):cols.stop + 1] = False
        assert np.array_equal(out.image()[untouched], n.image()[untouched])
        assert out.boxes == t.boxes
        assert out.meta == {
            "source_tumor_id": "t",
            "paired_normal_id": "n",
            "lambda_max": 0.6,
            "M": 2,
            "N": 2,
            "overlap": False,
        }

    def test_merge_shape_mismatch(self):
        from core.exceptions import ShapeError
        from core.translator import merge

        with pytest.raises(ShapeError):
            merge(normal("n", slice(0, 8)), np.zeros((4, 4)), np.zeros((16, 12)))


class TestAugmentDataset:

    def _augment(self, workers, out_dir=None):
        from core.masks import MaskSpec
        from core.rng import make_rng
        from core.translator import LambdaSchedule, augment_dataset

        tumors = [tumor(f"t{i}", box=(1 + i, 2, 3, 3)) for i in range(3)]
        pool = [normal(f"n{i}", slice(0, 8)) for i in range(3)]
        return augment_dataset(
            tumors, pool, 2, small_model(), LambdaSchedule.linear(0.6),
            MaskSpec(M=2, N=2, reference_side=None), make_rng(4, "translate"), out_dir=out_dir, workers=workers,
        )

    def test_counts_ids_and_distinct_partners(self, tmp_path):
        samples = self._augment(workers=1, out_dir=tmp_path)

        assert [s.id for s in samples] == [f"translated-t{i}-{j}" for i in range(3) for j in range(2)]
        for i in range(3):
            partners = [s.meta["paired_normal_id"] for s in samples if s.meta["source_tumor_id"] == f"t{i}"]
            assert len(set(partners)) == 2
        assert (tmp_path / "manifest.jsonl").exists()
        assert len(list((tmp_path / "images").iterdir())) == 6

    def test_independent_of_workers(self):
        serial = self._augment(workers=1)
        parallel = self._augment(workers=3)

        assert [s.meta for s in serial] == [s.meta for s in parallel]
        for a, b in zip(serial, parallel):
            np.testing.assert_array_equal(a.pixels, b.pixels)

    def test_pool_exhausted(self):
        from core.exceptions import NoPairError
        from core.masks import MaskSpec
        from core.rng import make_rng
        from core.translator import LambdaSchedule, augment_dataset

        with pytest.raises(NoPairError) as exc:
            augment_dataset(
                [tumor("t")], [normal("n", slice(0, 8))], 2, small_model(), LambdaSchedule.linear(0.6),
                MaskSpec(M=2, N=2, reference_side=None), make_rng(0),
            )
        assert exc.value.details["tumor"] == "t"

"""Multi-stage pipeline runs on a tiny configuration."""

import pytest

from core.config_manager import RunConfig

pytestmark = pytest.mark.integration


def tiny_config(output_dir, **overrides) -> RunConfig:
    values = {
        "seed": 3,
        "output_dir": output_dir,
        "data": {
            "n_normal": 5,
            "n_tumor": 5,
            "workers": 2,
            "phantom": {
                "size": [80, 64],
                "tumor_radius": [3.0, 4.0],
                "semi_axis_rows": [0.42, 0.43],
                "semi_axis_cols": [0.7, 0.71],
            },
        },
        "ae": {
            "encoder_channels": [1, 4, 16],
            "decoder_channels": [4, 1],
            "lr": 0.002,
            "init_noise": 0.005,
            "max_steps": 100,
        },
        "translation": {"mask": {"M": 4, "N": 4, "reference_side": None}, "per_tumor": 2, "workers": 2},
        "attention": {"base_channels": 2},
        "detector": {"fpn_channels": 4, "steps": 2, "batch_size": 2, "score_threshold": 0.05},
        "ablation": {"seeds": [0], "arms": ["baseline", "lit"]},
    }
    values.update(overrides)
    return RunConfig(**values)


class TestDataAndTranslation:

    def test_synth_train_ae_translate(self, tmp_path):
        from core.pipeline import PipelineContext, cmd_synth, cmd_train_ae, cmd_translate
        from utils.persistence import read_csv, read_jsonl

        config = tiny_config(tmp_path)
        ctx = PipelineContext(config)

        synth = cmd_synth(config, context=ctx)
        assert synth["images"] == 10
        assert (synth["train"], synth["val"], synth["test"]) == (6, 2, 2)

        trained = cmd_train_ae(config, context=ctx)
        assert trained["status"] == "converged"
        assert trained["final_loss"] < config.ae.loss_threshold
        assert (tmp_path / "checkpoints" / "ae.rplk").exists()
        assert len(read_csv(tmp_path / "metrics" / "ae_loss.csv")) == trained["steps"] + 1

        summary = cmd_translate(config, context=ctx)
        assert summary == {
            "originals": {"images": 3, "boxes": 3},
            "translated": {"images": 6, "boxes": 6},
            "total": {"images": 9, "boxes": 9},
        }
        rows = read_csv(tmp_path / "metrics" / "translation_summary.csv")
        assert [(r["set"], r["images"]) for r in rows] == [("originals", "3"), ("translated", "6"), ("total", "9")]

        records = read_jsonl(tmp_path / "translated" / "manifest.jsonl")
        assert len(records) == 6
        assert all(r["split"] == "train" and len(r["boxes"]) == 1 for r in records)
        assert {r["M"] for r in records} == {4}

        patches = read_csv(tmp_path / "metrics" / "reference_patches.csv")
        assert [r["id"] for r in patches] == [r["id"] for r in records]
        for row in patches:
            # 80x64 image in 5x4 patches: 16x16 grid
            assert 0 <= int(row["before"]) <= int(row["after"]) <= 256

    def test_synth_is_reproducible(self, tmp_path):
        from core.pipeline import cmd_synth

        cmd_synth(tiny_config(tmp_path / "a"))
        cmd_synth(tiny_config(tmp_path / "b"))

        first = (tmp_path / "a" / "data" / "manifest.jsonl").read_bytes()
        assert first == (tmp_path / "b" / "data" / "manifest.jsonl").read_bytes()


class TestDetectionStages:

    def test_train_infer_eval(self, tmp_path):
        from core.pipeline import PipelineContext, cmd_eval, cmd_infer, cmd_synth, cmd_train_ae, cmd_train_det, cmd_translate
        from utils.persistence import read_csv

        config = tiny_config(tmp_path)
        ctx = PipelineContext(config)
        cmd_synth(config, context=ctx)
        cmd_train_ae(config, context=ctx)
        cmd_translate(config, context=ctx)

        trained = cmd_train_det(config, with_translation=True, context=ctx)
        assert trained["arm"] == "replica"

        inferred = cmd_infer(config, trained["checkpoint"], "val", context=ctx)
        assert inferred["images"] == 2
        report = cmd_eval(config, inferred["detections"], "val", context=ctx)

        for value in report.metrics().values():
            assert value is None or 0.0 <= value <= 1.0
        metrics = {r["metric"] for r in read_csv(tmp_path / "metrics" / "metrics_val.csv")}
        assert {"AP", "AP50", "AP75", "APm", "APl", "TP", "FP", "FN"} == metrics

    def test_baseline_checkpoint_reloads_without_attention(self, tmp_path):
        from core.pipeline import PipelineContext, cmd_synth, cmd_train_det, load_detector

        config = tiny_config(tmp_path, detector={"use_attention": False, "fpn_channels": 4, "steps": 1, "batch_size": 2})
        ctx = PipelineContext(config)
        cmd_synth(config, context=ctx)
        trained = cmd_train_det(config, with_translation=False, context=ctx)

        assert trained["arm"] == "baseline"
        model = load_detector(tiny_config(tmp_path), trained["checkpoint"], (80, 64))
        assert model.attention is None

    def test_ab_summary(self, tmp_path):
        from core.pipeline import PipelineContext, cmd_ab, cmd_synth, cmd_train_ae, cmd_translate
        from utils.persistence import read_csv

        config = tiny_config(tmp_path)
        ctx = PipelineContext(config)
        cmd_synth(config, context=ctx)
        cmd_train_ae(config, context=ctx)
        cmd_translate(config, context=ctx)
        cmd_ab(config, context=ctx)

        rows = read_csv(tmp_path / "metrics" / "ab_summary.csv")
        assert [(r["arm"], r["run"]) for r in rows] == [
            ("baseline", "0"), ("baseline", "best"), ("baseline", "mean"), ("baseline", "variance"),
            ("lit", "0"), ("lit", "best"), ("lit", "mean"), ("lit", "variance"),
        ]


class TestRerun:

    @staticmethod
    def _run_all(config):
        from core.pipeline import PipelineContext, cmd_eval, cmd_infer, cmd_synth, cmd_train_ae, cmd_train_det, cmd_translate

        ctx = PipelineContext(config)
        cmd_synth(config, context=ctx)
        cmd_train_ae(config, context=ctx)
        cmd_translate(config, context=ctx)
        trained = cmd_train_det(config, with_translation=True, context=ctx)
        inferred = cmd_infer(config, trained["checkpoint"], "val", context=ctx)
        cmd_eval(config, inferred["detections"], "val", context=ctx)

    @staticmethod
    def _artifacts(root):
        return {
            str(path.relative_to(root)): path.read_bytes()
            for path in sorted(root.rglob("*"))
            if path.is_file() and path.relative_to(root).parts[0] != "logs"
        }

    def test_full_pipeline_rerun_is_byte_identical(self, tmp_path):
        self._run_all(tiny_config(tmp_path / "a"))
        self._run_all(tiny_config(tmp_path / "b"))

        first = self._artifacts(tmp_path / "a")
        second = self._artifacts(tmp_path / "b")
        for name in (
            "data/manifest.jsonl",
            "checkpoints/ae.rplk",
            "metrics/ae_loss.csv",
            "translated/manifest.jsonl",
            "metrics/reference_patches.csv",
            "checkpoints/detector_translation.rplk",
            "metrics/detector_translation_loss.csv",
            "metrics/detections_val.jsonl",
            "metrics/metrics_val.csv",
        ):
            assert name in first
        assert first.keys() == second.keys()
        assert [name for name in first if first[name] != second[name]] == []

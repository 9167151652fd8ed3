"""
Tests for the pipeline commands: exit codes, dataset determinism, resumable
training and the micro-scale end-to-end run.
"""

import json
import math
from pathlib import Path

import pandas as pd
import pytest

from svam import pipeline_cli
from svam.checkpoint import load_checkpoint
from svam.errors import (CheckpointMismatchError, ConfigError, DatasetError, GradientError, NumericalError,
                         SvamError)
from svam.world_sim import DATASET_MAGIC

MICRO = str(Path(__file__).resolve().parent.parent / "config" / "micro.json")


def run_cli(*args) -> int:
    return pipeline_cli.main(list(args))


def micro_variant(tmp_path: Path, name: str, **training) -> str:
    """Copy of the micro config with training overrides."""
    payload = json.loads(Path(MICRO).read_text(encoding="utf-8"))
    payload["training"].update(training)
    path = tmp_path / name
    path.write_text(json.dumps(payload), encoding="utf-8")
    return str(path)


class TestHelpers:
    def test_exit_codes(self):
        assert pipeline_cli.exit_code_for(ConfigError("x")) == 2
        assert pipeline_cli.exit_code_for(CheckpointMismatchError("x")) == 3
        assert pipeline_cli.exit_code_for(NumericalError("ddpm_sample", 3)) == 4
        assert pipeline_cli.exit_code_for(GradientError(["w"])) == 1
        assert pipeline_cli.exit_code_for(DatasetError("x")) == 1
        assert pipeline_cli.exit_code_for(SvamError("x")) == 1

    def test_milestones(self):
        assert pipeline_cli.milestones(0, 5, 2) == [2, 4, 5]
        assert pipeline_cli.milestones(2, 3, 2) == [3]
        assert pipeline_cli.milestones(4, 4, 2) == []
        assert pipeline_cli.milestones(0, 4, 0) == [4]

    def test_loss_summary(self):
        summary = pipeline_cli.loss_summary([(i, 1.0) for i in range(20)] + [(20 + i, 0.1) for i in range(20)])
        assert summary["initial"] == pytest.approx(1.0)
        assert summary["final"] == pytest.approx(0.1)
        assert summary["drop"] == pytest.approx(0.9)

    def test_checkpoint_names_per_variant(self, micro_config):
        assert pipeline_cli.checkpoint_path(micro_config, 2, "gt_targets").name == "stage2_gt.ckpt"
        assert pipeline_cli.checkpoint_path(micro_config, 2, "no_geo").name == "stage2.ckpt"
        assert pipeline_cli.checkpoint_path(micro_config, 3, "raw_only").name == "stage3_raw_only.ckpt"

    def test_bootstrap_degenerate_and_spread(self):
        assert pipeline_cli.bootstrap_delta([1, 1, 1], [0, 0, 0]) == (1.0, 1.0)
        low, high = pipeline_cli.bootstrap_delta([1, 0, 1, 1, 0, 1], [0, 0, 1, 0, 0, 0])
        assert low <= 0.5 <= high


class TestExitCodes:
    def test_unknown_config_key(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"vdm": {"sampler": "ddim"}}))
        assert run_cli("train", "--stage", "1", "--config", str(path), "--out", str(tmp_path / "run")) == 2

    def test_stage2_without_stage1_checkpoint(self, tmp_path):
        assert run_cli("train", "--stage", "2", "--config", MICRO, "--out", str(tmp_path)) == 3

    def test_stage1_without_dataset(self, tmp_path):
        assert run_cli("train", "--stage", "1", "--config", MICRO, "--out", str(tmp_path)) == 1

    def test_eval_without_checkpoints(self, tmp_path):
        assert run_cli("eval", "--config", MICRO, "--out", str(tmp_path)) == 3


class TestGenData:
    def test_repeat_run_is_byte_identical(self, tmp_path):
        first, second = tmp_path / "a", tmp_path / "b"
        assert run_cli("gen-data", "--config", MICRO, "--out", str(first)) == 0
        assert run_cli("gen-data", "--config", MICRO, "--out", str(second)) == 0
        payload = (first / "dataset.svds").read_bytes()
        assert payload[:8] == DATASET_MAGIC
        assert payload == (second / "dataset.svds").read_bytes()
        assert (first / "config.json").exists()

    def test_seed_changes_dataset(self, tmp_path):
        run_cli("gen-data", "--config", MICRO, "--out", str(tmp_path / "a"))
        run_cli("gen-data", "--config", MICRO, "--out", str(tmp_path / "b"), "--seed", "1")
        assert (tmp_path / "a" / "dataset.svds").read_bytes() != (tmp_path / "b" / "dataset.svds").read_bytes()


@pytest.mark.slow
class TestResume:
    def test_resumed_stage1_matches_uninterrupted_run(self, tmp_path):
        whole, split = tmp_path / "whole", tmp_path / "split"
        for out in (whole, split):
            assert run_cli("gen-data", "--config", MICRO, "--out", str(out)) == 0

        assert run_cli("train", "--stage", "1", "--config", MICRO, "--out", str(whole)) == 0
        short = micro_variant(tmp_path, "short.json", vdm_steps=2)
        assert run_cli("train", "--stage", "1", "--config", short, "--out", str(split)) == 0
        assert run_cli("train", "--stage", "1", "--resume", "--config", MICRO, "--out", str(split)) == 0

        assert (whole / "stage1.ckpt").read_bytes() == (split / "stage1.ckpt").read_bytes()
        whole_losses = pd.read_csv(whole / "stage1_loss.csv")
        split_losses = pd.read_csv(split / "stage1_loss.csv")
        pd.testing.assert_frame_equal(whole_losses, split_losses)

    def test_changed_backbone_config_rejects_checkpoint(self, tmp_path):
        assert run_cli("gen-data", "--config", MICRO, "--out", str(tmp_path)) == 0
        assert run_cli("train", "--stage", "1", "--config", MICRO, "--out", str(tmp_path)) == 0
        payload = json.loads(Path(MICRO).read_text(encoding="utf-8"))
        payload["vdm"]["steps"] = 3
        changed = tmp_path / "changed.json"
        changed.write_text(json.dumps(payload))
        assert run_cli("train", "--stage", "2", "--config", str(changed), "--out", str(tmp_path)) == 3


@pytest.mark.slow
class TestGradcheckCommand:
    def test_passes(self, tmp_path):
        assert run_cli("gradcheck", "--out", str(tmp_path)) == 0
        result = json.loads((tmp_path / "gradcheck.json").read_text())
        assert result["passed"]
        assert set(result["blocks"]) == {"linear", "denoiser", "decoupler_geo", "decoupler_sem",
                                         "uni_perceiver", "policy"}

    def test_injected_fault_fails(self, tmp_path):
        assert run_cli("gradcheck", "--inject-fault", "--out", str(tmp_path)) == 1
        result = json.loads((tmp_path / "gradcheck.json").read_text())
        assert not result["passed"]
        assert all(not block["passed"] for block in result["blocks"].values())


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipeline")
    assert run_cli("gen-data", "--config", MICRO, "--out", str(out)) == 0
    for stage in ("1", "2", "3"):
        assert run_cli("train", "--stage", stage, "--config", MICRO, "--out", str(out)) == 0
    return out


@pytest.mark.slow
class TestMicroPipeline:
    def test_stage_artifacts(self, trained_run):
        for name in ("stage1.ckpt", "stage2.ckpt", "stage3.ckpt", "stage1_loss.csv", "stage2_geo_loss.csv",
                     "stage2_sem_loss.csv", "stage3_loss.csv"):
            assert (trained_run / name).exists(), name
        stage2 = json.loads((trained_run / "stage2_summary.json").read_text())
        assert stage2["mode"] == "self"
        assert stage2["teacher_generated"] >= 1
        assert stage2["teacher_generated"] + stage2["teacher_cache_verified"] == 8
        assert "gate_passed" in json.loads((trained_run / "stage3_summary.json").read_text())

    def test_loss_logs_cover_every_step(self, trained_run):
        losses = pd.read_csv(trained_run / "stage1_loss.csv")
        assert list(losses.columns) == ["step", "loss"]
        assert losses["step"].tolist() == [0, 1, 2]

    def test_stage3_checkpoint_holds_normalizer(self, trained_run):
        checkpoint = load_checkpoint(trained_run / "stage3.ckpt")
        assert checkpoint.tensors["normalizer.std"].shape == (3,)

    def test_eval_report(self, trained_run):
        assert run_cli("eval", "--config", MICRO, "--out", str(trained_run)) == 0
        report = json.loads((trained_run / "eval.json").read_text())
        assert 0.0 <= report["overall"]["success_mean"] <= 1.0
        assert report["gate"]["name"] == "full_success"
        rows = pd.read_csv(trained_run / "eval.csv")
        for steps, calls in zip(rows["steps"], rows["denoiser_calls"]):
            assert calls == math.ceil(steps / 8)
        assert (trained_run / "eval_trace.jsonl").read_text().strip()

    def test_trained_eval_is_byte_identical_across_runs(self, trained_run):
        first = trained_run / "first_eval.json"
        assert run_cli("eval", "--config", MICRO, "--out", str(trained_run)) == 0
        (trained_run / "eval.json").replace(first)
        assert run_cli("eval", "--config", MICRO, "--out", str(trained_run)) == 0
        assert first.read_bytes() == (trained_run / "eval.json").read_bytes()

    def test_untrained_eval_is_deterministic(self, trained_run):
        first = trained_run / "first.csv"
        assert run_cli("eval", "--untrained-policy", "--config", MICRO, "--out", str(trained_run)) == 0
        (trained_run / "eval_untrained.csv").replace(first)
        assert run_cli("eval", "--untrained-policy", "--config", MICRO, "--out", str(trained_run)) == 0
        assert first.read_text() == (trained_run / "eval_untrained.csv").read_text()

    def test_raw_only_ablation(self, trained_run):
        assert run_cli("ablate", "--variant", "raw_only", "--config", MICRO, "--out", str(trained_run)) == 0
        result = json.loads((trained_run / "ablation.json").read_text())
        assert [row["variant"] for row in result["matrix"]] == ["full", "raw_only"]
        low, high = result["full_vs_raw_only"]["ci95"]
        assert low <= result["full_vs_raw_only"]["delta"] <= high
        assert (trained_run / "stage3_raw_only.ckpt").exists()
        assert not (trained_run / "stage2_raw_only.ckpt").exists()

    def test_latency_report(self, trained_run):
        assert run_cli("bench-latency", "--config", MICRO, "--out", str(trained_run)) == 0
        report = json.loads((trained_run / "latency.json").read_text())
        assert report["sampler_ratio"] > 0
        assert set(report["median_ms"]) == {"video_generation", "one_step_features", "decouplers",
                                            "action_expert", "raw_action_expert"}
        assert set(report["gates"]) == {"sampler_ratio", "overhead"}

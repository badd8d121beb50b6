import json
from pathlib import Path

import pytest
from typer.testing import CliRunner

from evifuse.cli import app
from evifuse.config import ClusterConfig, PipelineConfig, save_config
from evifuse.errors import InputMissingError, ValidationError
from evifuse.pipeline import RunReport, StageReport, Workspace, parallel_map, resolve_workers, run_stage, stage_plan
from evifuse.records import read_json, read_jsonl
from evifuse.synth import NoiseConfig, SynthConfig


def clean_config(**overrides) -> PipelineConfig:
    settings = dict(
        evidence="synthetic",
        synth=SynthConfig(num_images=6, num_classes=3, width=64, height=64),
        write_previews=True,
    )
    settings.update(overrides)
    return PipelineConfig(**settings)


def tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def square(x: int) -> int:
    return x * x


class TestCommandLine:
    def setup_method(self):
        self.runner = CliRunner()

    def invoke(self, *args):
        return self.runner.invoke(app, [str(a) for a in args])

    def synth_and_all(self, cfg_path: Path, out: Path) -> None:
        assert self.invoke("synth", "--config", cfg_path, "--out", out).exit_code == 0
        assert self.invoke("all", "--config", cfg_path, "--out", out).exit_code == 0

    def test_noise_free_run_drops_nothing(self, tmp_path):
        save_config(tmp_path / "cfg.json", clean_config())
        out = tmp_path / "run"
        self.synth_and_all(tmp_path / "cfg.json", out)

        report = read_json(out / "report.json")
        assert report["status"] == "ok"
        assert report["dropped_instances"] == 0
        assert [s["stage"] for s in report["stages"]] == [
            "heatmap", "fuse", "cluster", "relabel", "pixels", "harvest", "eval",
        ]
        assert "seconds" not in report["stages"][0]

        images = read_jsonl(out / "images.jsonl", "image")
        assert len(images) == 6
        for record in images:
            for folder, suffix in (("heatmaps", "evt"), ("labels", "evt"), ("probability", "evt"), ("previews", "png")):
                assert (out / folder / f"{record['image_id']}.{suffix}").is_file()
        assert read_jsonl(out / "relabeled.jsonl", "instance")
        assert not read_jsonl(out / "outliers.jsonl", "instance")
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["summary"]["CorLoc"] == 1.0
        assert (out / "metrics.tsv").read_text().startswith("class\t")

    def test_runs_are_deterministic(self, tmp_path):
        save_config(tmp_path / "cfg.json", clean_config())
        self.synth_and_all(tmp_path / "cfg.json", tmp_path / "one")
        self.synth_and_all(tmp_path / "cfg.json", tmp_path / "two")
        assert tree(tmp_path / "one") == tree(tmp_path / "two")

    def test_worker_count_does_not_change_outputs(self, tmp_path):
        save_config(tmp_path / "one.json", clean_config(workers=1))
        save_config(tmp_path / "two.json", clean_config(workers=2))
        self.synth_and_all(tmp_path / "one.json", tmp_path / "a")
        self.synth_and_all(tmp_path / "two.json", tmp_path / "b")
        assert tree(tmp_path / "a") == tree(tmp_path / "b")

    def test_seed_override(self, tmp_path):
        save_config(tmp_path / "cfg.json", clean_config())
        self.invoke("synth", "--config", tmp_path / "cfg.json", "--out", tmp_path / "a", "--seed", 1)
        self.invoke("synth", "--config", tmp_path / "cfg.json", "--out", tmp_path / "b", "--seed", 2)
        assert (tmp_path / "a" / "ground_truth.jsonl").read_bytes() != (tmp_path / "b" / "ground_truth.jsonl").read_bytes()

    def test_timings(self, tmp_path):
        save_config(tmp_path / "cfg.json", clean_config())
        self.invoke("synth", "--config", tmp_path / "cfg.json", "--out", tmp_path, "--timings")
        assert "seconds" in read_json(tmp_path / "report.json")["stages"][0]

    def test_missing_input_exits_with_two(self, tmp_path):
        result = self.invoke("heatmap", "--out", tmp_path)
        assert result.exit_code == 2
        error = read_json(tmp_path / "error.json")
        assert error["type"] == "InputMissingError"
        assert error["path"] == str(tmp_path / "images.jsonl")
        assert read_json(tmp_path / "report.json")["status"] == "error"

    def test_bad_config_exits_with_one(self, tmp_path):
        (tmp_path / "cfg.json").write_text('{"fusion": {"tau_hi": 0.7}}')
        result = self.invoke("synth", "--config", tmp_path / "cfg.json", "--out", tmp_path / "run")
        assert result.exit_code == 1
        error = read_json(tmp_path / "run" / "error.json")
        assert error["type"] == "ValidationError"
        assert "fusion.tau_hi" in error["message"]

    def test_corrupt_input_exits_with_one(self, tmp_path):
        (tmp_path / "images.jsonl").write_text("not json\n")
        result = self.invoke("anchors", "--out", tmp_path)
        assert result.exit_code == 1
        assert read_json(tmp_path / "error.json")["type"] == "FormatError"

    def test_inputs_from_separate_directory(self, tmp_path):
        save_config(tmp_path / "cfg.json", clean_config())
        self.invoke("synth", "--config", tmp_path / "cfg.json", "--out", tmp_path / "data")
        result = self.invoke("anchors", "--in", tmp_path / "data", "--out", tmp_path / "anchors")
        assert result.exit_code == 0
        report = read_json(tmp_path / "anchors" / "report.json")
        assert report["stages"][0]["counts"]["anchors"] > 0
        assert len(list((tmp_path / "anchors" / "anchors").iterdir())) == 6


class TestStagePlan:
    def test_all_adds_eval_with_ground_truth(self, tmp_path):
        ws = Workspace(None, tmp_path)
        assert stage_plan("all", ws)[-1] == "harvest"
        (tmp_path / "ground_truth.jsonl").write_text("")
        assert stage_plan("all", ws)[-1] == "eval"
        assert stage_plan("fuse", ws) == ["fuse"]

    def test_unknown_stage(self, tmp_path):
        with pytest.raises(ValidationError):
            stage_plan("train", Workspace(None, tmp_path))

    def test_workspace_prefers_output(self, tmp_path):
        (tmp_path / "in").mkdir()
        (tmp_path / "out").mkdir()
        (tmp_path / "in" / "x.jsonl").write_text("")
        ws = Workspace(tmp_path / "in", tmp_path / "out")
        assert ws.find("x.jsonl") == tmp_path / "in" / "x.jsonl"
        (tmp_path / "out" / "x.jsonl").write_text("")
        assert ws.find("x.jsonl") == tmp_path / "out" / "x.jsonl"
        with pytest.raises(InputMissingError):
            ws.find("y.jsonl")


class TestReports:
    def test_dropped_instances(self):
        fuse = StageReport("fuse")
        fuse.warnings["empty_intersection"] += 2
        run = RunReport("all", [fuse, StageReport("cluster", {"outliers": 3}), StageReport("relabel", {"discarded": 1})])
        assert run.dropped_instances == 3
        assert run.to_dict()["schema"] == "report"

    def test_parallel_map_keeps_order(self):
        assert parallel_map(square, [3, 1, 2], 1) == [9, 1, 4]
        assert parallel_map(square, [3, 1, 2, 5], 2) == [9, 1, 4, 25]
        assert resolve_workers(0) >= 1
        assert resolve_workers(3) == 3


def stage(run: RunReport, name: str) -> StageReport:
    return next(s for s in run.stages if s.stage == name)


class TestInstanceStages:
    def run_all(self, cfg: PipelineConfig, out: Path) -> RunReport:
        run_stage("synth", cfg, None, out)
        return run_stage("all", cfg, None, out)

    def test_relabel_sees_every_fused_instance(self, tmp_path):
        noise = NoiseConfig(outlier_rate=1.0)
        cfg = clean_config(synth=SynthConfig(num_images=6, num_classes=3, width=64, height=64, noise=noise))
        run = self.run_all(cfg, tmp_path)

        fused = stage(run, "fuse").counts["instances"]
        assert stage(run, "cluster").counts["outliers"] > 0
        assert stage(run, "relabel").counts["instances"] == fused
        relabeled = read_jsonl(tmp_path / "relabeled.jsonl", "instance")
        discarded = read_jsonl(tmp_path / "discarded.jsonl", "instance")
        assert len(relabeled) + len(discarded) == fused
        assert run.dropped_instances == len(discarded) + sum(stage(run, "fuse").warnings.values())
        assert run.dropped_instances == 0

    def test_clustering_switched_off(self, tmp_path):
        cfg = clean_config(cluster=ClusterConfig(enabled=False))
        assert stage_plan("all", Workspace(None, tmp_path), cfg) == ["heatmap", "fuse", "relabel", "pixels", "harvest"]
        run = self.run_all(cfg, tmp_path)
        assert [s.stage for s in run.stages] == ["heatmap", "fuse", "relabel", "pixels", "harvest", "eval"]
        assert not (tmp_path / "outliers.jsonl").exists()
        assert stage(run, "relabel").counts["instances"] == stage(run, "fuse").counts["instances"]
        assert (tmp_path / "local_attention.jsonl").is_file()

    def test_instance_stages_switched_off(self, tmp_path):
        cfg = clean_config(instance_stages=False)
        run = self.run_all(cfg, tmp_path)
        assert [s.stage for s in run.stages] == ["heatmap", "fuse", "pixels", "harvest", "eval"]
        for name in ("clustered.jsonl", "relabeled.jsonl", "local_attention.jsonl"):
            assert not (tmp_path / name).exists()
        metrics = read_json(tmp_path / "metrics.json")
        assert metrics["summary"]["CorLoc"] == 1.0
        assert run.dropped_instances == 0

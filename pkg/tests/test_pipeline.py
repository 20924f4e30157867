import json

import pandas as pd
import pytest

from cohort_phenotyper.errors import StageFailed, ValidationError
from cohort_phenotyper.pipeline import STAGES, PipelineConfig, run_pipeline, write_summary

from conftest import small_config


def fast_config(out_dir, **kw):
    d = {
        "synth": small_config(n_subjects=70, beta=(-0.8, 1.2, -0.5), seed=3).to_dict(),
        "seed": 11,
        "out_dir": str(out_dir),
        "n_trees": 8,
        "n_top": 2,
        "tsne": {"perplexity": 15.0, "total_iters": 300, "exaggeration_iters": 100,
                 "momentum_switch": 100},
        "gmm": {"restarts": 2},
        "k_range": [1, 3],
    }
    d.update(kw)
    return PipelineConfig.from_dict(d)


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return run_pipeline(fast_config(out))


class TestRun:
    def test_all_stages_ok(self, full_run):
        stages = full_run.manifest["payload"]["stages"]
        assert [s["stage"] for s in stages] == list(STAGES)
        assert all(s["status"] == "ok" for s in stages)

    def test_artifacts_written(self, full_run):
        out = full_run.out_dir
        for name in ("cohort.csv", "importance.csv", "wald_lgmm.csv", "wald_lr_visit1.csv",
                     "embedding.csv", "assignments.csv", "kld.csv", "trajectory.json",
                     "comparison.csv", "metrics.json", "summary.md", "notes.json",
                     "embedding.svg"):
            assert (out / name).is_file(), name
        for s in full_run.manifest["payload"]["stages"]:
            assert all(len(h) == 64 for h in s["outputs"].values())

    def test_two_clusters_by_default(self, full_run):
        gmm = json.loads((full_run.out_dir / "gmm.json").read_text())
        assert gmm["K"] == 2 and gmm["selection"] == 2
        labels = pd.read_csv(full_run.out_dir / "assignments.csv")["cluster"]
        assert set(labels) <= {1, 2}

    def test_rerun_identical_payload(self, full_run, tmp_path):
        again = run_pipeline(fast_config(tmp_path / "again"))
        assert again.manifest["payload"] == full_run.manifest["payload"]
        assert again.manifest["payload_sha256"] == full_run.manifest["payload_sha256"]
        assert (tmp_path / "again" / "embedding.svg").read_bytes() == \
            (full_run.out_dir / "embedding.svg").read_bytes()

    def test_subgroups_reported(self, full_run):
        metrics = json.loads((full_run.out_dir / "metrics.json").read_text())
        assert [s["group"] for s in metrics["subgroups"]] == [1, 3]
        assert set(metrics["pooled"]) == {"lgmm", "lr"}

    def test_summary(self, full_run):
        text = write_summary(full_run.out_dir).read_text()
        assert "Mixed-effects logistic model" in text and "Group 0:" in text


class TestPartialAndFailure:
    def test_until(self, tmp_path):
        res = run_pipeline(fast_config(tmp_path, model="lr", visit=2), until="fit")
        assert [s["stage"] for s in res.manifest["payload"]["stages"]] == ["preprocess", "rank", "fit"]
        assert (tmp_path / "wald_lr_visit2.csv").is_file()
        assert not (tmp_path / "wald_lgmm.csv").exists()

    def test_missing_input(self, tmp_path):
        cfg = PipelineConfig(cohort_csv=str(tmp_path / "nope.csv"),
                             schema_json=str(tmp_path / "nope.json"), out_dir=str(tmp_path / "o"))
        with pytest.raises(StageFailed) as info:
            run_pipeline(cfg)
        assert info.value.stage == "preprocess"
        manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
        assert manifest["payload"]["stages"][0]["status"] == "failed"

    def test_bad_feature(self, tmp_path):
        with pytest.raises(StageFailed) as info:
            run_pipeline(fast_config(tmp_path, features=["nope"]), until="rank")
        assert info.value.stage == "rank"

    def test_unknown_stage(self, tmp_path):
        with pytest.raises(ValidationError):
            run_pipeline(fast_config(tmp_path), until="plot")


class TestConfig:
    def test_unknown_key(self):
        with pytest.raises(ValidationError):
            PipelineConfig.from_dict({"perplexity": 30})

    def test_unknown_tsne_key(self):
        with pytest.raises(ValidationError):
            PipelineConfig(tsne={"theta": 0.5})

    @pytest.mark.parametrize("kw", [{"model": "svm"}, {"k": 0}, {"k_range": [3, 1]},
                                    {"cohort_csv": "a.csv"}, {"threshold": 1.0},
                                    {"smote_classes": "all"}])
    def test_invalid(self, kw):
        with pytest.raises(ValidationError):
            PipelineConfig(**kw)

    def test_json_round_trip(self, tmp_path):
        cfg = fast_config(tmp_path)
        (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
        assert PipelineConfig.from_json(tmp_path / "c.json") == cfg

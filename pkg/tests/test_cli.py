import csv
import json

import numpy as np
import pytest

from nprepmet.cli import EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, main, resolve_threads
from nprepmet.errors import ConfigError

SMALL = {
    "world": {"n_base_classes": 6, "n_novel_classes": 5, "train_scenes_per_class": 2, "seed": 3},
    "embed": {"trunk_dims": [16], "embed_dim": 8},
    "train": {"epochs": 2, "lr_decay_epochs": [2], "n_reps": 3},
    "eval": {"way": 3, "episodes": 2},
}


def read_meta_csv(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# ")
    return json.loads(lines[0][2:]), list(csv.DictReader(lines[1:]))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "cfg.json").write_text(json.dumps(SMALL))
    assert main(["gen-data", "--config", str(d / "cfg.json"), "--out", str(d / "data.json")]) == EXIT_OK
    assert main(["train", "--config", str(d / "cfg.json"), "--data", str(d / "data.json"),
                 "--out", str(d / "run")]) == EXIT_OK
    return d


def args(ws, *extra):
    return ["--ckpt", str(ws / "run" / "final.json"), "--data", str(ws / "data.json"), *extra]


class TestGenData:
    def test_seed_echo(self, workspace, tmp_path, capsys):
        assert main(["gen-data", "--config", str(workspace / "cfg.json"), "--seed", "9",
                     "--out", str(tmp_path / "d.json")]) == EXIT_OK
        assert "seed: 9" in capsys.readouterr().out
        doc = json.loads((tmp_path / "d.json").read_text())
        assert doc["run"]["seed"] == 9 and doc["world_config"]["seed"] == 9

    def test_bitwise_reproducible(self, workspace, tmp_path):
        main(["gen-data", "--config", str(workspace / "cfg.json"), "--out", str(tmp_path / "d.json")])
        assert (tmp_path / "d.json").read_bytes() == (workspace / "data.json").read_bytes()


class TestTrain:
    def test_outputs(self, workspace):
        run = workspace / "run"
        assert (run / "final.json").exists() and (run / "loss_curve.csv").exists()
        assert json.loads((run / "final.json").read_text())["extra"]["run"]["config"]["train"]["epochs"] == 2

    def test_epochs_flag_trims_decay(self, workspace, tmp_path, capsys):
        assert main(["train", "--config", str(workspace / "cfg.json"), "--data", str(workspace / "data.json"),
                     "--out", str(tmp_path / "r"), "--epochs", "1"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "epoch   1" in out and "epoch   2" not in out

    def test_resume_matches(self, workspace, tmp_path):
        assert main(["train", "--config", str(workspace / "cfg.json"), "--data", str(workspace / "data.json"),
                     "--out", str(tmp_path / "r"), "--resume", str(workspace / "run" / "epoch_001.json")]) == EXIT_OK
        a = json.loads((tmp_path / "r" / "final.json").read_text())["arrays"]
        b = json.loads((workspace / "run" / "final.json").read_text())["arrays"]
        assert a == b

    def test_missing_data(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "none.json"), "--out", str(tmp_path / "r")]) == EXIT_USAGE


class TestEvaluate:
    def test_report(self, workspace, tmp_path, capsys):
        out = tmp_path / "ev"
        assert main(["evaluate", *args(workspace, "--out", str(out), "--seed", "4")]) == EXIT_OK
        assert "seed: 4" in capsys.readouterr().out
        meta, rows = read_meta_csv(out / "report.csv")
        assert meta["seed"] == 4 and meta["config"]["eval"]["way"] == 3 and len(meta["episode_seeds"]) == 2
        assert len(rows) == 6 and set(rows[0]) == {"episode_seed", "class_id", "AP", "episode_mAP"}
        rep = json.loads((out / "report.json").read_text())
        assert rep["n_episodes"] == 2

    def test_inference_pos(self, workspace, tmp_path):
        assert main(["evaluate", *args(workspace, "--out", str(tmp_path), "--inference", "pos")]) == EXIT_OK
        meta, _ = read_meta_csv(tmp_path / "report.csv")
        assert meta["config"]["inference"]["positive_only"] is True

    def test_detections_export(self, workspace, tmp_path):
        det = tmp_path / "dets.csv"
        assert main(["evaluate", *args(workspace, "--out", str(tmp_path), "--detections", str(det))]) == EXIT_OK
        _, rows = read_meta_csv(det)
        assert rows and list(rows[0]) == ["episode_seed", "query_index", "x1", "y1", "x2", "y2", "class_id", "score"]
        assert all(0 < float(r["score"]) <= 1 for r in rows)

    def test_zero_episodes(self, workspace, tmp_path, capsys):
        assert main(["evaluate", *args(workspace, "--out", str(tmp_path), "--episodes", "0")]) == EXIT_OK
        assert "mAP: nan" in capsys.readouterr().out

    def test_way_too_large(self, workspace, tmp_path):
        assert main(["evaluate", *args(workspace, "--out", str(tmp_path), "--way", "6")]) == EXIT_USAGE

    def test_identical_runs(self, workspace, tmp_path):
        for name in ("a", "b"):
            main(["evaluate", *args(workspace, "--out", str(tmp_path / name))])
        for f in ("report.json", "report.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


class TestAblate:
    def test_grid(self, workspace, tmp_path):
        grid = tmp_path / "g.json"
        grid.write_text(json.dumps({"strategy": ["rd", "cluster-min"], "beta": [0.1, 0.3]}))
        out = tmp_path / "ab.csv"
        assert main(["ablate", *args(workspace, "--grid", str(grid), "--out", str(out))]) == EXIT_OK
        meta, rows = read_meta_csv(out)
        assert len(rows) == 4 and list(rows[0])[:2] == ["strategy", "beta"]
        assert meta["grid"]["beta"] == [0.1, 0.3]
        assert len(json.loads(out.with_suffix(".json").read_text())["rows"]) == 4

    @pytest.mark.parametrize("text", ['{"gamma": [1]}', "not json", "{}"])
    def test_bad_grid(self, workspace, tmp_path, text):
        grid = tmp_path / "g.json"
        grid.write_text(text)
        assert main(["ablate", *args(workspace, "--grid", str(grid), "--out", str(tmp_path / "a.csv"))]) == EXIT_USAGE


class TestGradcheck:
    def test_passes(self, tmp_path, capsys):
        assert main(["gradcheck", "--probes", "30", "--out", str(tmp_path / "g.json")]) == EXIT_OK
        assert "seed: 0" in capsys.readouterr().out
        doc = json.loads((tmp_path / "g.json").read_text())
        assert doc["passed"] and len(doc["probes"]) == 30

    def test_zero_probes(self):
        assert main(["gradcheck", "--probes", "0"]) == EXIT_USAGE

    def test_failure_exit_code(self, monkeypatch):
        import nprepmet.cli as cli
        from nprepmet.gradcheck import GradCheckResult, Probe
        monkeypatch.setattr(cli, "run_default", lambda **kw: GradCheckResult([Probe("w", (0,), 1.0, 2.0)]))
        assert main(["gradcheck"]) == EXIT_NUMERICAL


class TestExport:
    def test_rows_and_norms(self, workspace, tmp_path):
        out = tmp_path / "e.csv"
        assert main(["export-embeddings", *args(workspace, "--out", str(out), "--samples", "25")]) == EXIT_OK
        meta, rows = read_meta_csv(out)
        reps = [r for r in rows if r["source"] == "representative"]
        assert len(reps) == 6 * 3 * 2 and len(rows) - len(reps) == 25 == meta["samples"]
        vecs = np.array([[float(r[f"e{i}"]) for i in range(8)] for r in rows])
        assert np.allclose(np.linalg.norm(vecs, axis=1), 1.0, atol=1e-12)

    def test_negative_samples(self, workspace, tmp_path):
        assert main(["export-embeddings", *args(workspace, "--out", str(tmp_path / "e.csv"),
                                                "--samples", "-1")]) == EXIT_USAGE


class TestErrors:
    @pytest.mark.parametrize("argv", [[], ["bogus"], ["train"], ["gen-data", "--out"]])
    def test_usage(self, argv):
        assert main(argv) == EXIT_USAGE

    def test_bad_config_value(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"prob": {"beta": 1.0}}))
        assert main(["gen-data", "--config", str(p), "--out", str(tmp_path / "d.json")]) == EXIT_USAGE

    def test_mismatched_config(self, workspace, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"world": {"n_base_classes": 7}}))
        assert main(["evaluate", *args(workspace, "--config", str(p), "--out", str(tmp_path))]) == EXIT_USAGE

    def test_threads(self, monkeypatch):
        assert resolve_threads(3) == 3
        monkeypatch.setenv("NPMD_THREADS", "2")
        assert resolve_threads(None) == 2
        monkeypatch.setenv("NPMD_THREADS", "x")
        with pytest.raises(ConfigError):
            resolve_threads(None)
        assert main(["gradcheck", "--probes", "5"]) == EXIT_USAGE

import json
import shutil
import subprocess
import sys

import jsonschema
import numpy as np
import pytest

from gpdistill.cli import (DEFAULTS, PipelineConfig, cmd_autolabel, cmd_synth, main, split_scenes,
                           stage_seed)
from gpdistill.cloud import PointCloud, save_cloud
from gpdistill.evaluation import REPORT_SCHEMA
from gpdistill.exceptions import ConfigurationError
from gpdistill.synth import default_camera
from gpdistill.camera import save_camera, write_ppm

SMALL = {
    "seed": 1,
    "n_scenes": 5,
    "n_classes": 2,
    "test_fraction": 0.4,
    "synth": {"plane_points": 6000, "points_per_object": 600},
    "objectness": {"min_cluster_size": 10},
    "hand_labels": {"per_class": 3},
    "teacher": {"num_inducing": 8, "epochs": 5, "predict_samples": 32},
    "distill": {"epochs": 5},
}


def write_config(path, workdir, **over):
    cfg = json.loads(json.dumps(SMALL))
    cfg["workdir"] = str(workdir)
    for k, v in over.items():
        if isinstance(v, dict):
            cfg.setdefault(k, {}).update(v)
        else:
            cfg[k] = v
    path.write_text(json.dumps(cfg))
    return str(path)


def run(config, *args):
    return main(["--config", config, *args])


@pytest.fixture(scope="module")
def done(tmp_path_factory):
    """A workdir on which the whole small pipeline has run once."""
    root = tmp_path_factory.mktemp("pipeline")
    config = write_config(root / "cfg.json", root / "work")
    assert run(config, "pipeline") == 0
    return root, config


def _reuse(done, tmp_path, **over):
    """Fresh workdir sharing the finished pipeline's scenes."""
    root, _ = done
    work = tmp_path / "work"
    shutil.copytree(root / "work", work)
    return write_config(tmp_path / "cfg.json", work, **over), work


class TestConfig:
    def test_defaults_roster(self):
        cfg = PipelineConfig.from_dict({})
        assert cfg.class_names[0] == "background" and len(cfg.class_names) == 7

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError):
            PipelineConfig.from_dict({"sedd": 3})

    def test_background_first(self):
        with pytest.raises(ConfigurationError):
            PipelineConfig.from_dict({"class_names": ["cup", "background"]})

    def test_duplicate_classes(self):
        with pytest.raises(ConfigurationError):
            PipelineConfig.from_dict({"class_names": ["background", "cup", "cup"]})

    def test_nested_override_keeps_defaults(self):
        cfg = PipelineConfig.from_dict({"teacher": {"epochs": 3}})
        assert cfg.train_config().epochs == 3
        assert cfg.raw["teacher"]["num_inducing"] == DEFAULTS["teacher"]["num_inducing"]

    def test_stage_seeds(self):
        assert stage_seed(0, "a") == stage_seed(0, "a")
        assert len({stage_seed(0, "a"), stage_seed(0, "b"), stage_seed(1, "a")}) == 3
        assert 0 <= stage_seed(5, "train-teacher") < 2 ** 31

    def test_split(self, tmp_path):
        cfg = PipelineConfig.from_dict({"workdir": str(tmp_path), "test_fraction": 0.3})
        (tmp_path / "scenes").mkdir()
        for i in range(10):
            (tmp_path / "scenes" / f"s{i:02d}.csv").write_text("")
        train, test = split_scenes(cfg)
        assert test == ["s07", "s08", "s09"] and len(train) == 7


class TestUsageErrors:
    def test_help(self, capsys):
        assert main(["--help"]) == 0

    def test_missing_command(self, capsys):
        assert main([]) == 2

    def test_malformed_config(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        path.write_text("{not json")
        assert run(str(path), "synth") == 2

    def test_unknown_config_key(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        path.write_text('{"bogus": 1}')
        assert run(str(path), "synth") == 2

    def test_missing_config_file(self, tmp_path, capsys):
        assert run(str(tmp_path / "nope.json"), "synth") == 2


class TestSynth:
    def test_zero_scenes(self, tmp_path):
        config = write_config(tmp_path / "c.json", tmp_path / "work")
        assert run(config, "synth", "--n-scenes", "0") == 0
        assert not (tmp_path / "work").exists()

    def test_twenty_scenes(self, tmp_path):
        config = write_config(tmp_path / "c.json", tmp_path / "work",
                              synth={"plane_points": 500, "points_per_object": 100})
        assert run(config, "synth", "--n-scenes", "20") == 0
        scenes = tmp_path / "work" / "scenes"
        for ext in (".csv", ".ppm", ".gt.jsonl", ".camera.json"):
            assert len(list(scenes.glob(f"*{ext}"))) == 20

    def test_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            config = write_config(tmp_path / f"{name}.json", tmp_path / name,
                                  synth={"plane_points": 500, "points_per_object": 100})
            assert run(config, "synth", "--n-scenes", "2") == 0
        for f in sorted((tmp_path / "a" / "scenes").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / "scenes" / f.name).read_bytes()

    def test_unwritable_workdir(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("")
        config = write_config(tmp_path / "c.json", blocker / "work")
        assert run(config, "synth", "--n-scenes", "1") == 2

    def test_seed_override(self, tmp_path):
        config = write_config(tmp_path / "c.json", tmp_path / "a")
        args = ["synth", "--n-scenes", "1"]
        assert run(config, "--seed", "7", *args) == 0
        assert run(config, "--seed", "8", "--workdir", str(tmp_path / "b"), *args) == 0
        a = (tmp_path / "a" / "scenes" / "scene_0000.csv").read_bytes()
        assert a != (tmp_path / "b" / "scenes" / "scene_0000.csv").read_bytes()


class TestAutolabel:
    def test_records_per_scene(self, done):
        root, _ = done
        work = root / "work"
        train, _ = split_scenes(PipelineConfig.load(root / "cfg.json"))
        for sid in train:
            anns = (work / "annotations" / f"{sid}.jsonl").read_text().splitlines()
            assert len(anns) == 5
            assert all("label" not in json.loads(a) for a in anns)
            assert len(list((work / "thumbnails").glob(f"{sid}_*.ppm"))) == 5

    def test_idempotent(self, done, tmp_path):
        config, work = _reuse(done, tmp_path)
        before = {p.name: p.read_bytes() for p in (work / "annotations").iterdir()}
        assert run(config, "autolabel") == 0
        assert before == {p.name: p.read_bytes() for p in (work / "annotations").iterdir()}

    def test_missing_camera(self, done, tmp_path, capsys):
        config, work = _reuse(done, tmp_path)
        (work / "scenes" / "scene_0001.camera.json").unlink()
        assert run(config, "autolabel") == 2

    def test_empty_residual(self, tmp_path):
        scenes = tmp_path / "work" / "scenes"
        scenes.mkdir(parents=True)
        rng = np.random.default_rng(0)
        cam = default_camera()
        for sid in ("p0", "p1"):
            pts = np.column_stack([rng.uniform(-0.3, 0.3, 3000), rng.uniform(-0.2, 0.2, 3000), np.zeros(3000)])
            save_cloud(PointCloud(pts, np.full((3000, 3), 150.0)), scenes / f"{sid}.csv")
            write_ppm(scenes / f"{sid}.ppm", np.zeros((cam.height, cam.width, 3), np.uint8))
            save_camera(cam, scenes / f"{sid}.camera.json")
        config = write_config(tmp_path / "c.json", tmp_path / "work")
        assert run(config, "autolabel") == 0
        assert (tmp_path / "work" / "annotations" / "p0.jsonl").read_text() == ""


class TestTeacherStage:
    def test_trace_improves(self, done):
        trace = json.loads((done[0] / "work" / "teacher_trace.json").read_text())
        assert trace["elbo"][-1] > trace["elbo"][0]

    def test_missing_hand_labels(self, done, tmp_path, capsys):
        config, work = _reuse(done, tmp_path)
        (work / "hand_labels.jsonl").unlink()
        assert run(config, "train-teacher") == 2

    def test_class_without_labels(self, done, tmp_path, capsys):
        config, work = _reuse(done, tmp_path)
        path = work / "hand_labels.jsonl"
        kept = [line for line in path.read_text().splitlines() if json.loads(line)["probs"][0] != 1]
        path.write_text("\n".join(kept) + "\n")
        assert run(config, "train-teacher") == 3

    def test_integer_label_format(self, done, tmp_path):
        config, work = _reuse(done, tmp_path)
        path = work / "hand_labels.jsonl"
        recs = [json.loads(line) for line in path.read_text().splitlines()]
        alt = tmp_path / "alt.jsonl"
        alt.write_text("".join(json.dumps({"scene_id": r["scene_id"], "cluster_id": r["cluster_id"],
                                           "label": int(np.argmax(r["probs"]))}) + "\n" for r in recs))
        assert run(config, "train-teacher", "--hand-labels", str(alt)) == 0
        assert (work / "teacher.json").read_bytes() == (done[0] / "work" / "teacher.json").read_bytes()


class TestLabelStage:
    def test_coverage_and_precedence(self, done):
        work = done[0] / "work"
        labels = [json.loads(line) for line in (work / "soft_labels.jsonl").read_text().splitlines()]
        n_ann = sum(len(p.read_text().splitlines()) for p in (work / "annotations").iterdir())
        assert len(labels) == n_ann
        for rec in labels:
            assert sum(rec["probs"]) == pytest.approx(1.0)
        hand = {(r["scene_id"], r["cluster_id"]): r for r in
                map(json.loads, (work / "hand_labels.jsonl").read_text().splitlines())}
        for rec in labels:
            key = (rec["scene_id"], rec["cluster_id"])
            assert (rec["provenance"] == "hand") == (key in hand)
            if key in hand:
                assert rec["probs"] == hand[key]["probs"]

    def test_extractor_mismatch(self, done, tmp_path, capsys):
        config, _ = _reuse(done, tmp_path, extractor="precomputed")
        assert run(config, "label") == 3

    def test_class_mismatch(self, done, tmp_path, capsys):
        config, _ = _reuse(done, tmp_path, class_names=["background", "x", "y"])
        assert run(config, "label") == 3

    def test_missing_teacher(self, done, tmp_path, capsys):
        config, work = _reuse(done, tmp_path)
        (work / "teacher.json").unlink()
        assert run(config, "label") == 2


class TestStudentStage:
    def test_deterministic(self, done, tmp_path):
        config, work = _reuse(done, tmp_path)
        assert run(config, "train-student") == 0
        assert (work / "student.json").read_bytes() == (done[0] / "work" / "student.json").read_bytes()

    def test_unknown_loss(self, done, tmp_path, capsys):
        config, _ = _reuse(done, tmp_path, distill={"loss_kind": "hinge"})
        assert run(config, "train-student") == 2

    def test_empty_soft_labels(self, done, tmp_path, capsys):
        config, work = _reuse(done, tmp_path)
        (work / "soft_labels.jsonl").write_text("")
        assert run(config, "train-student") == 3


class TestEvalStage:
    def test_report(self, done):
        root, config = done
        doc = json.loads((root / "work" / "reports" / "student_report.json").read_text())
        jsonschema.validate(doc, REPORT_SCHEMA)
        assert set(doc["per_class"]) == set(PipelineConfig.load(config).class_names)
        assert (root / "work" / "reports" / "student_pr.csv").exists()

    def test_teacher_report(self, done, tmp_path, capsys):
        config, work = _reuse(done, tmp_path)
        assert run(config, "eval", "--model", "teacher") == 0
        jsonschema.validate(json.loads((work / "reports" / "teacher_report.json").read_text()), REPORT_SCHEMA)
        assert "overall" in capsys.readouterr().out

    def test_no_held_out(self, done, tmp_path, capsys):
        config, _ = _reuse(done, tmp_path, test_fraction=0.0)
        assert run(config, "eval") == 3

    def test_module_entry_point(self, done, tmp_path):
        config, _ = _reuse(done, tmp_path)
        proc = subprocess.run([sys.executable, "-m", "gpdistill.cli", "--config", config, "eval"],
                              capture_output=True, text=True)
        assert proc.returncode == 0 and proc.stdout.splitlines()[0].split()[0] == "Category"


def test_python_api_matches_cli(tmp_path):
    cfg = PipelineConfig.from_dict({**json.loads(json.dumps(SMALL)), "workdir": str(tmp_path), "n_scenes": 3})
    assert cmd_synth(cfg) == ["scene_0000", "scene_0001", "scene_0002"]
    assert cmd_autolabel(cfg) == 10

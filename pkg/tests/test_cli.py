import csv
import io
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from cetal.cli import ablation_table, main
from cetal.config import RunConfig, apply_overrides, default_config
from cetal.data import load_dataset
from cetal.tensor import ConfigurationError
from cetal.training import load_checkpoint

TINY = ["model.embed_dim=8", "model.num_blocks=2", "model.num_heads=2", "model.reduction=4",
        "training.epochs=2", "training.warmup_epochs=1", "training.eval_every=1", "training.lr=0.001"]


def _run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out
    return code, (json.loads(out) if out.strip() else None)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert main(["--quiet", "synth", "--out", str(d), "--classes", "3", "--channels", "6", "--sequences", "8",
                 "--length", "128", "--seed", "2"]) == 0
    return d / "manifest.json"


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["--quiet", "train", f"data.train={json.dumps(str(dataset))}", *TINY, "--out", str(out)]) == 0
    return out


class TestSynth:
    def test_deterministic_bytes(self, tmp_path, capsys):
        for name in ("a", "b"):
            code, summary = _run(capsys, "--quiet", "synth", "--out", str(tmp_path / name), "--classes", "4",
                                 "--channels", "12", "--seed", "7", "--sequences", "3")
            assert code == 0 and summary["sequences"] == 3
        for f in sorted(os.listdir(tmp_path / "a")):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        ds = load_dataset(tmp_path / "a" / "manifest.json")
        assert len(ds) == 3 and ds.num_classes == 4 and ds.num_channels == 12

    def test_one_class_rejected(self, tmp_path, capsys):
        code, _ = _run(capsys, "--quiet", "synth", "--out", str(tmp_path), "--classes", "1")
        assert code == 2


class TestAugment:
    def test_expands_dataset(self, dataset, tmp_path, capsys):
        code, _ = _run(capsys, "--quiet", "augment", "--data", str(dataset), "--out", str(tmp_path), "--permutations",
                       "--normalize", "--transform", "invert", "--transform", "noise:0.1")
        assert code == 0
        assert len(load_dataset(tmp_path / "manifest.json")) == 8 * 6 * 3

    def test_bad_transform(self, dataset, tmp_path, capsys):
        code, _ = _run(capsys, "--quiet", "augment", "--data", str(dataset), "--out", str(tmp_path), "--transform", "magnify:0.5")
        assert code == 2


class TestTrain:
    def test_outputs_and_header(self, trained):
        assert (trained / "best.ckpt").exists() and (trained / "last.ckpt").exists()
        lines = [json.loads(l) for l in (trained / "metrics.jsonl").read_text().splitlines()]
        assert lines[0]["event"] == "header"
        assert lines[0]["config"]["training"]["lr"] == 0.001
        assert [l["epoch"] for l in lines[1:]] == [0, 1]

    def test_resume_continues_numbering(self, dataset, trained, tmp_path, capsys):
        run = tmp_path / "run"
        run.mkdir()
        for f in ("metrics.jsonl", "last.ckpt", "best.ckpt"):
            (run / f).write_bytes((trained / f).read_bytes())
        argv = ["--quiet", "train", f"data.train={json.dumps(str(dataset))}", *TINY, "training.epochs=4", "--out", str(run)]
        code, summary = _run(capsys, *argv, "--resume", str(run / "last.ckpt"))
        assert code == 0 and summary["epochs_run"] == 2
        epochs = [json.loads(l).get("epoch") for l in (run / "metrics.jsonl").read_text().splitlines()]
        assert [e for e in epochs if e is not None] == [0, 1, 2, 3]
        assert load_checkpoint(run / "last.ckpt").epoch == 3

    def test_resume_fingerprint_mismatch(self, dataset, trained, tmp_path, capsys):
        code, _ = _run(capsys, "--quiet", "train", f"data.train={json.dumps(str(dataset))}", *TINY, "model.embed_dim=16",
                       "--out", str(tmp_path), "--resume", str(trained / "last.ckpt"))
        assert code == 2

    def test_interleaved_variant(self, dataset, tmp_path, capsys):
        code, summary = _run(capsys, "--quiet", "train", f"data.train={json.dumps(str(dataset))}", *TINY,
                             'model.variant="ce_interleaved"', "--out", str(tmp_path))
        assert code == 0 and load_checkpoint(summary["checkpoint"]).header["model"]["variant"] == "ce_interleaved"

    @pytest.mark.parametrize("override", ["model.depth=3", "training.lr=-1", "nosection.x=1", 'model.variant="xl"'])
    def test_config_errors(self, dataset, tmp_path, capsys, override):
        code, _ = _run(capsys, "--quiet", "train", f"data.train={json.dumps(str(dataset))}", *TINY, override,
                       "--out", str(tmp_path))
        assert code == 2

    def test_missing_data(self, tmp_path, capsys):
        code, _ = _run(capsys, "--quiet", "train", f"data.train={json.dumps(str(tmp_path / 'none.json'))}", *TINY,
                       "--out", str(tmp_path))
        assert code == 3

    def test_config_file(self, dataset, tmp_path, capsys):
        cfg = apply_overrides(default_config(), [f"data.train={json.dumps(str(dataset))}", *TINY])
        path = tmp_path / "run.json"
        path.write_text(json.dumps(cfg))
        code, _ = _run(capsys, "--quiet", "train", str(path), "training.epochs=3", "--out", str(tmp_path / "o"))
        assert code == 0
        header = json.loads((tmp_path / "o" / "metrics.jsonl").read_text().splitlines()[0])
        assert header["config"]["training"]["epochs"] == 3


class TestEval:
    def test_report_and_determinism(self, dataset, trained, tmp_path, capsys):
        reports = []
        for name in ("a", "b"):
            code, summary = _run(capsys, "--quiet", "eval", "--checkpoint", str(trained / "best.ckpt"), "--data",
                                 str(dataset), "--out", str(tmp_path / name), "--svg")
            assert code == 0
            reports.append((tmp_path / name / "report.json").read_bytes())
        assert reports[0] == reports[1]
        rep = json.loads(reports[0])
        assert rep["thresholds"] == pytest.approx([0.3, 0.4, 0.5, 0.6, 0.7])
        assert rep["avg_map"] == pytest.approx(np.mean(rep["map_per_threshold"]), abs=1e-15)
        assert (tmp_path / "a" / "map.svg").read_text().startswith("<svg")
        rows = list(csv.reader(io.StringIO((tmp_path / "a" / "confusion.csv").read_text())))
        assert len(rows) == 1 + 4 and rows[0][-1] == "background"

    def test_fingerprint_mismatch_refused(self, dataset, trained, tmp_path, capsys):
        code, _ = _run(capsys, "--quiet", "eval", "model.embed_dim=16", "model.num_blocks=2", "model.num_heads=2",
                       "--checkpoint", str(trained / "best.ckpt"), "--data", str(dataset), "--out", str(tmp_path))
        assert code == 2

    def test_custom_thresholds(self, dataset, trained, tmp_path, capsys):
        code, summary = _run(capsys, "--quiet", "eval", "--checkpoint", str(trained / "best.ckpt"), "--data", str(dataset),
                             "--out", str(tmp_path), "--thresholds", "0.1,0.9")
        assert code == 0 and len(summary["map_per_threshold"]) == 2

    def test_corrupt_checkpoint(self, dataset, tmp_path, capsys):
        (tmp_path / "x.ckpt").write_bytes(b"garbage")
        code, _ = _run(capsys, "--quiet", "eval", "--checkpoint", str(tmp_path / "x.ckpt"), "--data", str(dataset),
                       "--out", str(tmp_path))
        assert code == 3


class TestAblate:
    def test_five_rows_and_repeatable(self, dataset, tmp_path, capsys):
        argv = ["--quiet", "ablate", f"data.train={json.dumps(str(dataset))}", *TINY, "training.epochs=2",
                "--variants", "baseline,afse,afswish,afsesswish,ce"]
        tables = []
        for name in ("a", "b"):
            code, summary = _run(capsys, *argv, "--out", str(tmp_path / name))
            assert code == 0
            tables.append((tmp_path / name / "ablation.csv").read_text())
        assert tables[0] == tables[1]
        rows = list(csv.DictReader(io.StringIO(tables[0])))
        assert [r["variant"] for r in rows] == ["baseline", "afse", "afswish", "afsesswish", "ce_interleaved"]
        base = float(rows[0]["avg_map"])
        for r in rows:
            assert float(r["delta_vs_baseline"]) == pytest.approx(float(r["avg_map"]) - base, abs=2e-6)

    def test_unknown_variant(self, dataset, tmp_path, capsys):
        code, _ = _run(capsys, "--quiet", "ablate", f"data.train={json.dumps(str(dataset))}", *TINY, "--variants",
                       "baseline,megablock", "--out", str(tmp_path))
        assert code == 2

    def test_table_shape(self):
        rows = [{"variant": "baseline", "clip_length_s": 0.5, "seeds": 3, "avg_map": 0.5},
                {"variant": "ce_interleaved", "clip_length_s": 0.5, "seeds": 3, "avg_map": 0.6},
                {"variant": "baseline", "clip_length_s": None, "seeds": 3, "avg_map": 0.7},
                {"variant": "ce_interleaved", "clip_length_s": None, "seeds": 3, "avg_map": 0.65}]
        lines = ablation_table(rows).splitlines()
        assert lines[0] == "variant,clip_length_s,seeds,avg_map,delta_vs_baseline"
        assert lines[2] == "ce_interleaved,0.5,3,0.600000,+0.100000"
        assert lines[4] == "ce_interleaved,full,3,0.650000,-0.050000"


class TestRunConfig:
    def test_unknown_key_lists_offender(self):
        with pytest.raises(ConfigurationError, match="bogus"):
            RunConfig(apply_overrides(default_config(), ["training.bogus=1"]))

    def test_override_parsing(self):
        cfg = apply_overrides(default_config(), ["model.variant=ce", "training.lr=1e-3", "data.augment.permutations=true"])
        assert cfg["model"]["variant"] == "ce" and cfg["training"]["lr"] == 1e-3
        assert cfg["data"]["augment"]["permutations"] is True

    def test_override_needs_equals(self):
        with pytest.raises(ConfigurationError):
            apply_overrides(default_config(), ["training.lr"])


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "cetal", "synth", "--out", str(tmp_path), "--classes", "2",
                           "--channels", "4", "--sequences", "2", "--length", "64"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["sequences"] == 2
    for line in proc.stderr.splitlines():
        json.loads(line)  # every log line is JSON

import json
import shutil
import subprocess
import sys

import pytest

from helpers import bundled_experiment
from weakindex.cli import main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--bundled", "--out", str(d)]) == 0
    return d


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_stage_by_stage(workdir, capsys):
    d = workdir
    steps = [
        ["annotate", "--thesaurus", d / "thesaurus.json", "--corpus", d / "corpus.jsonl",
         "--out", d / "occ.jsonl", "--dump-dictionary", d / "dict.txt"],
        ["weaklabel", "--thesaurus", d / "thesaurus.json", "--corpus", d / "corpus.jsonl",
         "--occurrences", d / "occ.jsonl", "--out", d / "weak.csv", "--targets-out", d / "targets.json"],
        ["split", "--thesaurus", d / "thesaurus.json", "--weak", d / "weak.csv", "--ma1", 40,
         "--ma2", 30, "--seed", 1, "--undersample", 0, "--undersample-out", d / "und.txt",
         "--out", d / "splits.json"],
        ["featurize", "--corpus", d / "corpus.jsonl", "--occurrences", d / "occ.jsonl",
         "--splits", d / "splits.json", "--out", d / "raw.npz"],
        ["select", "--thesaurus", d / "thesaurus.json", "--features", d / "raw.npz",
         "--weak", d / "weak.csv", "--splits", d / "splits.json", "--targets", d / "targets.json",
         "--k", 40, "--report", d / "report.txt", "--out", d / "sel.json"],
        ["train", "--features", d / "raw.npz", "--selection", d / "sel.json", "--weak", d / "weak.csv",
         "--splits", d / "splits.json", "--targets", d / "targets.json", "--seed", 0,
         "--out", d / "model.json"],
        ["predict", "--model", d / "model.json", "--features", d / "raw.npz", "--selection",
         d / "sel.json", "--splits", d / "splits.json", "--split", "ma1", "--out", d / "pred.csv"],
        ["baseline", "--kind", "WSLabels", "--thesaurus", d / "thesaurus.json", "--corpus",
         d / "corpus.jsonl", "--weak", d / "weak.csv", "--splits", d / "splits.json",
         "--targets", d / "targets.json", "--out", d / "ws_pred.csv"],
        ["cv", "--features", d / "raw.npz", "--selection", d / "sel.json", "--weak", d / "weak.csv",
         "--splits", d / "splits.json", "--targets", d / "targets.json", "--seed", 0,
         "--k", 3, "--cv-seed", 0],
        ["relabel", "--model", d / "model.json", "--features", d / "raw.npz", "--selection",
         d / "sel.json", "--weak", d / "weak.csv", "--splits", d / "splits.json",
         "--out", d / "model2.json"],
    ]
    for argv in steps:
        code, out, err = _run(capsys, *argv)
        assert code == 0, (argv[0], err)
    for f in ("occ.jsonl", "dict.txt", "weak.csv", "targets.json", "splits.json", "und.txt",
              "raw.npz", "sel.json", "report.txt", "model.json", "pred.csv", "ws_pred.csv",
              "model2.json"):
        assert (d / f).is_file(), f
    code, out, _ = _run(capsys, "evaluate", "--pred", d / "pred.csv", "--golden", d / "golden.csv",
                        "--targets", d / "targets.json", "--out", d / "eval.csv")
    assert code == 0 and out.splitlines()[0] == "label,tp,fp,fn,precision,recall,f1"
    code, out, _ = _run(capsys, "evaluate", "--pred", d / "pred.csv", "--golden", d / "golden.csv",
                        "--kappa")
    assert code == 0 and "macro_kappa" in json.loads(out)


def test_failure_is_tagged(workdir, capsys):
    code, out, err = _run(capsys, "annotate", "--thesaurus", workdir / "missing.json", "--corpus",
                          workdir / "corpus.jsonl", "--out", workdir / "x.jsonl")
    assert code == 1
    assert err.startswith("weakindex annotate: ")


def test_run_and_rerun(tmp_path, capsys):
    cfg = bundled_experiment(tmp_path, baselines=None, cv=None, relabel=False)
    code, out, err = _run(capsys, "run", cfg)
    assert code == 0, err
    assert "computed" in out
    code, out, _ = _run(capsys, "run", cfg)
    assert code == 0 and "computed" not in out and "cached" in out
    assert (tmp_path / "out" / "reports" / "grid.csv").is_file()


def test_run_failure_names_stage(tmp_path, capsys):
    cfg = bundled_experiment(tmp_path, selectors={"methods": ["chi2"], "k": [10 ** 6]},
                             baselines=None, cv=None, relabel=False)
    code, _, err = _run(capsys, "run", cfg, "--output-dir", tmp_path / "o2")
    assert code == 1 and err.startswith("weakindex select: ")


def test_synth_generated(tmp_path, capsys):
    code, out, _ = _run(capsys, "synth", "--out", tmp_path, "--n", 30, "--seed", 2)
    assert code == 0
    assert sum(1 for _ in (tmp_path / "corpus.jsonl").open()) == 30


def test_console_entry_point(tmp_path):
    exe = shutil.which("weakindex")
    cmd = [exe] if exe else [sys.executable, "-m", "weakindex.cli"]
    res = subprocess.run(cmd + ["--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "0.1.0" in res.stdout
    res = subprocess.run(cmd + ["evaluate", "--pred", str(tmp_path / "no.csv"), "--golden", "x"],
                         capture_output=True, text=True)
    assert res.returncode == 1 and res.stderr.startswith("weakindex evaluate: ")

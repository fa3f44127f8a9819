import csv
import json
import time
from importlib import resources
from pathlib import Path

import pytest

from hypolab.cli import main
from hypolab.config import parse_config
from hypolab.errors import UsageError
from hypolab.runner import compare, run_config

SMALL = """
[run]
tasks = {tasks}
seed = {seed}
threads = {threads}

[model]
kind = TorusKFP
nx = {n}
nv = {n}

[weight.poly3]
family = PolyV
k = 3.0

[task.dyson]
nodes = 200
"""


def _write(tmp_path, name="small.cfg", tasks="spectrum, evolve, dyson", seed=0, threads=1, n=16):
    path = tmp_path / name
    path.write_text(SMALL.format(tasks=tasks, seed=seed, threads=threads, n=n))
    return path


def _csv_floats(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return rows[0], [[float(x) for x in r] for r in rows[1:]]


def test_run_writes_manifest_and_parsable_files(tmp_path):
    cfg = _write(tmp_path)
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["schema_version"] == 1 and set(man["tasks"]) == {"spectrum", "evolve", "dyson"}
    assert all(t["status"] == "OK" for t in man["tasks"].values())
    for name in man["files"]:
        path = out / name
        assert path.exists(), name
        if path.suffix == ".csv":
            header, rows = _csv_floats(path)
            assert header and rows
        if path.suffix == ".json" and name != "manifest.json":
            assert json.loads(path.read_text())["schema_version"] == 1


def test_determinism_across_threads(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", str(_write(tmp_path)), "--out", str(a), "--threads", "1"]) == 0
    assert main(["run", "--config", str(_write(tmp_path)), "--out", str(b), "--threads", "3"]) == 0
    for f in a.glob("*.csv"):
        assert f.read_bytes() == (b / f.name).read_bytes()
    assert compare(a, b)["max_diff"] == 0.0


def test_seed_only_changes_randomized_metrics(tmp_path):
    a = run_config(parse_config(_write(tmp_path, tasks="spectrum").read_text()), tmp_path / "a", seed=1)
    b = run_config(parse_config(_write(tmp_path, tasks="spectrum").read_text()), tmp_path / "b", seed=2)
    diff = compare(a, b)["diffs"]["spectrum"]
    assert diff["gap"] == 0.0 and diff["eig1_re"] == 0.0


def test_refinement_compare(tmp_path):
    a = run_config(parse_config(_write(tmp_path, tasks="spectrum", n=64).read_text()), tmp_path / "a")
    b = run_config(parse_config(_write(tmp_path, tasks="spectrum", n=96).read_text()), tmp_path / "b")
    assert compare(a, b)["diffs"]["spectrum"]["gap"] <= 0.05


def test_compare_mismatch(tmp_path):
    a = run_config(parse_config(_write(tmp_path, tasks="dyson").read_text()), tmp_path / "a")
    b = run_config(parse_config(_write(tmp_path, tasks="").read_text()), tmp_path / "b")
    assert b.tasks == {} and b.ok
    with pytest.raises(UsageError):
        compare(a, b)
    assert main(["compare", str(tmp_path / "a"), str(tmp_path / "b")]) == 1
    assert main(["compare", str(tmp_path / "a"), str(tmp_path / "a")]) == 0


def test_exit_codes(tmp_path, capsys):
    assert main([]) == 1
    assert main(["fly"]) == 1
    assert main(["run"]) == 1
    assert main(["run", "--config", str(tmp_path / "missing.cfg")]) == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("[splitting]\nM = -2\n")
    assert main(["run", "--config", str(bad)]) == 1
    assert "M" in capsys.readouterr().err
    # a fit over a window with too little decay is a numerical failure
    cfg = _write(tmp_path, tasks="evolve")
    cfg.write_text(cfg.read_text() + "\n[task.evolve]\nt_end = 0.2\n")
    assert main(["evolve", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["tasks"]["evolve"]["status"] == "FAILED"
    assert "evolve" in man["tasks"]["evolve"]["error"]


def test_single_task_subcommand(tmp_path):
    cfg = _write(tmp_path)
    assert main(["dyson", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    man = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert list(man["tasks"]) == ["dyson"]


def test_bundled_config(tmp_path):
    cfg = resources.files("hypolab") / "data" / "torus_gamma2.cfg"
    t0 = time.perf_counter()
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "bundle")]) == 0
    assert time.perf_counter() - t0 < 300
    man = json.loads((tmp_path / "bundle" / "manifest.json").read_text())
    assert len(man["tasks"]) == 6
    assert all(t["status"] == "OK" for t in man["tasks"].values())

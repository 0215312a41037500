import json

import numpy as np
import pytest

from implab import cli, config
from implab.io import load_checkpoint
from implab.tables import read_table

TINY = {
    "experiment": {"seed": 0},
    "data": {"kind": "two_spirals", "n_train": 200, "n_test": 200, "seed": 0},
    "model": {"widths": [8, 8]},
    "schedule": {"total_steps": 120, "lr": 0.05, "milestones": [60, 90]},
}


def write(tmp_path, name, cfg):
    path = tmp_path / f"{name}.ini"
    config.dump(cfg, path)
    return str(path)


def with_(base, **sections):
    out = {k: dict(v) for k, v in base.items()}
    for k, v in sections.items():
        out.setdefault(k, {}).update(v)
    return out


@pytest.fixture(scope="module")
def imp_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("imp")
    cfg = write(tmp, "imp", with_(TINY, imp={"max_levels": 3, "tau": 10, "replicates": 2}))
    assert cli.main(["imp", "--config", cfg, "--out", str(tmp / "run")]) == 0
    return tmp / "run"


def test_imp_table_matches_manifest(imp_run):
    meta, rows = read_table(imp_run / "imp.csv", "imp")
    doc = json.loads((imp_run / "manifest.json").read_text())
    assert len(rows) == doc["config"]["max_levels"] + 1 == len(doc["levels"]) == 4
    assert [r["level"] for r in rows] == [0, 1, 2, 3]
    assert meta["threshold"] == pytest.approx(doc["baseline"]["mean_error"] + doc["baseline"]["eps"])
    assert [r["surviving"] for r in rows] == [lv["surviving"] for lv in doc["levels"]]


def test_desk_preset_level_count(tmp_path):
    # the desk data and model with a short schedule: only the accounting is under test
    cfg = write(tmp_path, "desk", {"experiment": {"seed": 0},
                                   "schedule": {"total_steps": 60, "milestones": [30, 45]},
                                   "imp": {"max_levels": 2, "replicates": 2}})
    assert cli.main(["imp", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    _, rows = read_table(tmp_path / "o" / "imp.csv", "imp")
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert len(rows) == summary["results"]["levels"] == 3


def test_barrier_identical_endpoints_constant(tmp_path):
    cfg = write(tmp_path, "train", with_(TINY, train={"eval_every": 60}))
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "t")]) == 0
    model = tmp_path / "t" / "model.plck"
    ck, meta = load_checkpoint(model)
    assert ck.step == 120
    cfg = write(tmp_path, "barrier", {"experiment": {"seed": 0}, "data": TINY["data"],
                                      "inputs": {"a": str(model), "b": str(model)}})
    assert cli.main(["barrier", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    meta, rows = read_table(tmp_path / "b" / "path.csv", "path")
    errors = {r["test_error"] for r in rows}
    assert len(errors) == 1 and len(rows) == 11
    assert meta["barrier"] == 0.0


def test_theory_hand_well(tmp_path):
    cfg = write(tmp_path, "theory", {"experiment": {"seed": 0},
                                     "theory": {"eigenvalues": [1.0, 1.0, 4.0], "eps": 0.5, "R": 1.0}})
    assert cli.main(["theory", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    _, rows = read_table(tmp_path / "o" / "theory.csv", "theory")
    assert rows[0]["d_star"] == pytest.approx(1.8, abs=1e-12)
    assert rows[0]["f_max"] == pytest.approx(0.4, abs=1e-12)


def test_reruns_are_byte_identical(tmp_path):
    cfg = write(tmp_path, "theory", {"experiment": {"seed": 5},
                                     "theory": {"dim": 20, "radius": 1.0, "R": 1.0, "trials": 50}})
    for out in ("a", "b"):
        assert cli.main(["theory", "--config", cfg, "--out", str(tmp_path / out)]) == 0
    for name in ("theory.csv", "phase.csv", "summary.json", "summary.md"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_imp_rerun_identical(imp_run, tmp_path):
    cfg = write(tmp_path, "imp", with_(TINY, imp={"max_levels": 3, "tau": 10, "replicates": 2}))
    assert cli.main(["imp", "--config", cfg, "--out", str(tmp_path / "run")]) == 0
    for name in ("imp.csv", "manifest.json", "level_03.plck", "mask_next.plmk"):
        assert (imp_run / name).read_bytes() == (tmp_path / "run" / name).read_bytes()


@pytest.mark.parametrize("kind,section", [
    ("matrix", {}),
    ("barrier", {"levels": [0, 1]}),
    ("slice", {"levels": [0, 1, 2], "resolution": 4}),
    ("robustness", {}),
    ("cdf", {"levels": [1]}),
    ("spectrum", {"levels": [1], "iterations": 10, "probes": 2, "curvature_directions": 3}),
])
def test_run_consumers(imp_run, tmp_path, kind, section):
    cfg = write(tmp_path, kind, {"experiment": {"seed": 0}, "inputs": {"run": str(imp_run)}, kind: section})
    assert cli.main([kind, "--config", cfg, "--out", str(tmp_path / kind)]) == 0
    doc = json.loads((tmp_path / kind / "summary.json").read_text())
    for name in doc["outputs"]:
        assert (tmp_path / kind / name).exists()
    for name in doc["outputs"]:
        if name.endswith(".csv"):
            read_table(tmp_path / kind / name)


def test_matrix_diagonal_zero(imp_run, tmp_path):
    cfg = write(tmp_path, "m", {"experiment": {"seed": 0}, "inputs": {"run": str(imp_run)}})
    assert cli.main(["matrix", "--config", cfg, "--out", str(tmp_path / "m")]) == 0
    meta, rows = read_table(tmp_path / "m" / "matrix.csv", "matrix")
    assert all(r["barrier"] == 0.0 for r in rows if r["i"] == r["j"])
    M = {(r["i"], r["j"]): r["barrier"] for r in rows}
    assert all(M[i, j] == M[j, i] for i, j in M)
    _, mx = read_table(tmp_path / "m" / "matrix_max.csv", "matrix")
    _, imp_rows = read_table(imp_run / "imp.csv", "imp")
    assert [r["barrier"] for r in mx if r["i"] == r["j"]] == [r["test_error"] for r in imp_rows]


def test_report_renders(imp_run, tmp_path):
    cfg = write(tmp_path, "r", {"experiment": {"seed": 0}, "inputs": {"dirs": [str(imp_run)]}})
    assert cli.main(["report", "--config", cfg, "--out", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "run_imp.svg").exists()
    assert "imp.csv" in (tmp_path / "r" / "report.md").read_text()


def test_adaptive(tmp_path):
    cfg = write(tmp_path, "a", with_(TINY, adaptive={"fixed_levels": 3, "replicates": 2}))
    assert cli.main(["adaptive", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    _, fixed = read_table(tmp_path / "a" / "imp_fixed.csv", "imp")
    _, ada = read_table(tmp_path / "a" / "adaptive.csv", "adaptive")
    assert len(fixed) == 4
    assert len(ada) <= len(fixed)


def test_seed_override_and_threads(tmp_path):
    cfg = write(tmp_path, "t", {"experiment": {}, "theory": {"eigenvalues": [1.0, 2.0], "R": 0.5}})
    assert cli.main(["theory", "--config", cfg, "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert cli.main(["theory", "--config", cfg, "--out", str(tmp_path / "o"), "--seed", "3", "--threads", "1"]) == 0
    doc = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert doc["seed"] == 3


def test_exit_codes(tmp_path, imp_run):
    assert cli.main(["nonsense"]) == cli.EXIT_USAGE
    assert cli.main(["theory", "--seed", "-1"]) == cli.EXIT_CONFIG
    unknown = write(tmp_path, "u", {"experiment": {"kind": "sideways", "seed": 0}})
    assert cli.main(["run", "--config", unknown]) == cli.EXIT_KIND
    bad = tmp_path / "bad.ini"
    bad.write_text("[experiment\nseed = 0\n")
    assert cli.main(["theory", "--config", str(bad)]) == cli.EXIT_CONFIG
    mismatch = write(tmp_path, "mm", {"experiment": {"kind": "imp", "seed": 0}})
    assert cli.main(["theory", "--config", mismatch]) == cli.EXIT_CONFIG
    bad_key = write(tmp_path, "bk", with_(TINY, model={"depth": 3}))
    assert cli.main(["train", "--config", bad_key, "--out", str(tmp_path / "x")]) == cli.EXIT_CONFIG
    assert cli.main(["theory", "--config", str(tmp_path / "absent.ini")]) == cli.EXIT_MISSING
    missing = write(tmp_path, "mi", {"experiment": {"seed": 0}, "inputs": {"run": str(tmp_path / "nowhere")}})
    assert cli.main(["matrix", "--config", missing, "--out", str(tmp_path / "x")]) == cli.EXIT_MISSING
    junk = tmp_path / "junk.plck"
    junk.write_bytes(b"not a checkpoint at all")
    fmt = write(tmp_path, "fmt", {"experiment": {"seed": 0}, "data": TINY["data"],
                                  "inputs": {"a": str(junk), "b": str(junk)}})
    assert cli.main(["barrier", "--config", fmt, "--out", str(tmp_path / "x")]) == cli.EXIT_FORMAT


def test_config_round_trip_through_file(tmp_path):
    cfg = with_(TINY, imp={"ratio": [0.2], "tau": 10, "level_noise": True}, theory={"eps": 1e-300})
    path = write(tmp_path, "c", cfg)
    again = config.load(path)
    assert again == config.loads(config.dumps(again))
    assert again["imp"]["ratio"] == [0.2] and again["theory"]["eps"] == 1e-300
    assert np.array_equal(again["model"]["widths"], [8, 8])

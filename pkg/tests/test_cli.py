import json
import shutil

import pytest

from twice.cli import COMMANDS, RunConfig, derive_seed, main

CONFIG = """[run]
out = out
seed = 5
B = 2
K_grid = 2, 3
L_grid = 2
holdout_firm_fraction = 0.2

[simulate]
n_workers = 150
n_firms = 20
n_years = 4

[boost]
learning_rate = 0.3
max_rounds = 15
early_stop_patience = 5
min_leaf_size = 10

[tree]
min_leaf_size = 5

[explain]
features = age, tenure, education
grid_points = 6
"""


def run_all(cfg_path, out=None):
    extra = ["--out", str(out)] if out else []
    for cmd in COMMANDS:
        assert main([cmd, "--config", str(cfg_path), "--quiet"] + extra) == 0, cmd


def artifacts(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != "manifest.json"}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    cfg = d / "run.ini"
    cfg.write_text(CONFIG, encoding="utf-8")
    run_all(cfg)
    return d, cfg


def test_pipeline_outputs(pipeline):
    d, _ = pipeline
    out = d / "out"
    for name in ("panel.csv", "panel.schema.json", "connected.csv", "tune_loss.csv", "tune.json",
                 "partitions.json", "models.json", "metrics.csv", "decomposition.json", "sorting_matrix.csv",
                 "cell_rules.txt", "akm_firm_effects.csv", "concordance.json", "curves.csv",
                 "eventstudy.csv", "robustness.csv", "manifest.json"):
        assert (out / name).is_file(), name
    dec = json.loads((out / "decomposition.json").read_text())
    assert abs(dec["share_sum"] - 1.0) < 1e-6
    assert set(dec["shares"]) == {"worker", "firm", "sorting", "interaction", "residual"}
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["stages"]) == set(COMMANDS)
    assert (out / "tune_loss.csv").read_text().splitlines()[0] == "K,L,loss,cells_used"
    assert (out / "metrics.csv").read_text().splitlines()[1].startswith("TWICE,")


def test_rerun_byte_identical(pipeline, tmp_path):
    d, cfg = pipeline
    run_all(cfg, tmp_path / "again")
    assert artifacts(d / "out") == artifacts(tmp_path / "again")


def test_deleted_artifact_regenerates(pipeline, tmp_path):
    d, cfg = pipeline
    out = tmp_path / "copy"
    shutil.copytree(d / "out", out)
    target = out / "sorting_matrix.csv"
    before = target.read_bytes()
    target.unlink()
    assert main(["decompose", "--config", str(cfg), "--out", str(out), "--quiet"]) == 0
    assert target.read_bytes() == before


def test_missing_tune_artifact(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text(CONFIG, encoding="utf-8")
    assert main(["simulate", "--config", str(cfg), "--quiet"]) == 0
    assert main(["connect", "--config", str(cfg), "--quiet"]) == 0
    assert main(["fit", "--config", str(cfg), "--quiet"]) == 1
    assert main(["decompose", "--config", str(cfg), "--quiet"]) == 1


def test_invalid_config(tmp_path):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[run]\nbogus = 1\n", encoding="utf-8")
    assert main(["simulate", "--config", str(cfg), "--quiet"]) == 1
    cfg.write_text("[boost]\nlearning_rate = 7\n", encoding="utf-8")
    assert main(["simulate", "--config", str(cfg), "--quiet"]) == 1
    cfg.write_text("[run]\ninput = x.csv\n", encoding="utf-8")
    assert main(["connect", "--config", str(cfg), "--quiet"]) == 1
    assert main(["simulate", "--config", str(tmp_path / "absent.ini"), "--quiet"]) == 1


def test_config_overrides_and_seeds(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text(CONFIG, encoding="utf-8")
    rc = RunConfig.load(cfg, out=tmp_path / "o", seed=9)
    assert rc.seed == 9 and rc.out == tmp_path / "o" and rc.K_grid == [2, 3]
    assert derive_seed(5, "fit") == derive_seed(5, "fit") != derive_seed(5, "tune")
    assert 0 <= derive_seed(5, "fit") < 2 ** 32

import json
from pathlib import Path

import pandas as pd
import pytest
from alembic import command
from alembic.config import Config
from sqlalchemy import create_engine, inspect

from app import main
from models import DATABASE_URL_ENV_VAR, EvalRun, record_reports, session_factory
from utils.eval_metrics import EvalReport
from utils.manifest import read_manifest
from utils.panel import DemandPanel

SMALL_RUN = """
synthetic:
  n_vehicles: 20
  n_days: 3
  n_stations: 8
simulate:
  n_clusters: 3
train:
  window: 6
  batch_size: 16
model:
  channels: [4, 2]
  hidden: 6
"""
TAG = "first_come_p0.05"
ROOT = Path(__file__).resolve().parent.parent


@pytest.fixture(scope="module")
def config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("config") / "config.yaml"
    path.write_text(SMALL_RUN, encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory, config_path):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--config", str(config_path), "--seed", "3", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, config_path, sim_dir):
    out = tmp_path_factory.mktemp("train")
    argv = [
        "train", "--config", str(config_path), "--panel", str(sim_dir / f"panel_{TAG}.csv"),
        "--adjacency", str(sim_dir / "adjacency.csv"), "--model-kind", "tobit", "--epochs", "3", "--out", str(out),
    ]
    assert main(argv) == 0
    return out


def test_a_command_is_required():
    with pytest.raises(SystemExit):
        main([])


def test_missing_inputs_exit_with_2(tmp_path):
    assert main(["train", "--panel", str(tmp_path / "missing.csv"), "--out", str(tmp_path)]) == 2


def test_bad_config_exits_with_2(tmp_path):
    (tmp_path / "bad.yaml").write_text("plots: {}\n", encoding="utf-8")
    assert main(["simulate", "--config", str(tmp_path / "bad.yaml"), "--out", str(tmp_path)]) == 2


def test_simulate_outputs(sim_dir):
    for name in ("trips.csv", "stations.csv", "clusters.csv", "adjacency.csv", "stats.json", "scenarios.json",
                 f"ledger_{TAG}.csv", f"panel_{TAG}.csv", f"station_panel_{TAG}.csv", "charging_curves.csv"):
        assert (sim_dir / name).is_file(), name
    panel = DemandPanel.read_csv(sim_dir / f"panel_{TAG}.csv")
    assert panel.n_nodes == 3
    assert panel.n_hours % 24 == 0
    stats = json.loads((sim_dir / "stats.json").read_text())
    assert 0.0 <= stats[TAG]["overall"] <= 1.0
    manifest = read_manifest(sim_dir / "manifest.json")
    assert manifest.seeds == [3]
    assert f"panel_{TAG}.csv" in manifest.artifacts


def test_simulate_is_reproducible(tmp_path, config_path, sim_dir):
    assert main(["simulate", "--config", str(config_path), "--seed", "3", "--out", str(tmp_path)]) == 0
    for name in (f"panel_{TAG}.csv", f"ledger_{TAG}.csv", "manifest.json"):
        assert (tmp_path / name).read_bytes() == (sim_dir / name).read_bytes(), name


def test_train_writes_checkpoint_and_history(trained):
    history = pd.read_csv(trained / "history_tobit.csv")
    assert history["epoch"].tolist() == [1, 2, 3]
    assert (trained / "checkpoint_tobit.npz").is_file()
    assert "checkpoint_tobit.npz" in read_manifest(trained / "manifest.json").artifacts


def test_train_is_reproducible(tmp_path, config_path, sim_dir, trained):
    argv = [
        "train", "--config", str(config_path), "--panel", str(sim_dir / f"panel_{TAG}.csv"),
        "--adjacency", str(sim_dir / "adjacency.csv"), "--model-kind", "tobit", "--epochs", "3", "--out", str(tmp_path),
    ]
    assert main(argv) == 0
    for name in ("checkpoint_tobit.npz", "history_tobit.csv", "manifest.json"):
        assert (tmp_path / name).read_bytes() == (trained / name).read_bytes(), name


def test_evaluate_and_store(tmp_path, config_path, sim_dir, trained):
    db = f"sqlite:///{tmp_path / 'results.db'}"
    argv = [
        "evaluate", "--config", str(config_path), "--checkpoint", str(trained / "checkpoint_tobit.npz"),
        "--panel", str(sim_dir / f"panel_{TAG}.csv"), "--out", str(tmp_path / "eval"), "--db", db, "--html",
    ]
    assert main(argv) == 0
    report = json.loads((tmp_path / "eval" / "report.json").read_text())
    assert report["model_kind"] == "tobit"
    assert 0.0 <= report["icp"] <= 1.0
    assert len(pd.read_csv(tmp_path / "eval" / "per_node.csv")) == 3
    assert (tmp_path / "eval" / "forecast.html").is_file()

    session = session_factory(db)()
    try:
        assert session.query(EvalRun).count() == 1
        assert session.query(EvalRun).one().protocol == "single"
    finally:
        session.close()


def test_evaluate_rejects_a_panel_of_another_size(tmp_path, make_panel, trained):
    make_panel(k=2, n_hours=72).write_csv(tmp_path / "two_nodes.csv")
    argv = ["evaluate", "--checkpoint", str(trained / "checkpoint_tobit.npz"), "--panel", str(tmp_path / "two_nodes.csv"),
            "--out", str(tmp_path)]
    assert main(argv) == 2


def test_compete_runs_every_cell_and_seed(tmp_path, config_path, sim_dir):
    argv = [
        "compete", "--config", str(config_path), "--station-panel", str(sim_dir / f"station_panel_{TAG}.csv"),
        "--clusters", str(sim_dir / "clusters.csv"), "--adjacency", str(sim_dir / "adjacency.csv"),
        "--shares", "0.5", "--model-kinds", "qr", "censored_qr", "--n-seeds", "2", "--epochs", "1",
        "--out", str(tmp_path),
    ]
    assert main(argv) == 0
    reports = pd.read_csv(tmp_path / "reports.csv")
    summary = pd.read_csv(tmp_path / "summary.csv")
    assert len(reports) == 4
    assert sorted(reports["seed"].unique()) == [0, 1]
    assert summary["n_seeds"].tolist() == [2, 2]


def test_experiment_over_simulated_panels(tmp_path, config_path, sim_dir):
    argv = [
        "experiment", "--config", str(config_path), "--sim-dir", str(sim_dir), "--model-kinds", "gaussian",
        "--n-seeds", "1", "--epochs", "1", "--out", str(tmp_path),
    ]
    assert main(argv) == 0
    reports = pd.read_csv(tmp_path / "reports.csv")
    assert reports[["queue", "penetration", "model_kind"]].values.tolist() == [["first_come", 0.05, "gaussian"]]


def test_experiment_with_an_unknown_scenario(tmp_path, sim_dir):
    argv = ["experiment", "--sim-dir", str(sim_dir), "--queues", "three_hour", "--out", str(tmp_path)]
    assert main(argv) == 2


def test_record_reports(tmp_path):
    report = EvalReport("qr", 1.5, 0.9, 0.2, 0.8, "0", 0.0, 15.0, 2.0, 10, protocol="competition", market_share=0.5, seed=1)
    url = f"sqlite:///{tmp_path / 'db' / 'results.db'}"
    assert record_reports([report, report], url) == 2
    session = session_factory(url)()
    try:
        rows = session.query(EvalRun).all()
        assert [(r.protocol, r.market_share, r.queue) for r in rows] == [("competition", 0.5, None)] * 2
    finally:
        session.close()


def test_migrations_build_the_results_table(tmp_path, monkeypatch):
    url = f"sqlite:///{tmp_path / 'nested' / 'results.db'}"
    monkeypatch.setenv(DATABASE_URL_ENV_VAR, url)
    config = Config(str(ROOT / "alembic.ini"))
    config.attributes["configure_logger"] = False
    command.upgrade(config, "head")

    columns = {c["name"] for c in inspect(create_engine(url)).get_columns("eval_runs")}
    assert columns == {c.name for c in EvalRun.__table__.columns}
    report = EvalReport("tobit", 0.5, 0.9, 0.2, 0.8, "0", 0.0, 5.0, 2.0, 10, seed=0)
    assert record_reports([report], url) == 1

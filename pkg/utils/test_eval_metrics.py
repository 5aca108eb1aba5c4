from functools import partial

import numpy as np
import pytest

from utils.errors import DomainError, ValidationError
from utils.eval_metrics import (
    EvalReport,
    ExperimentCell,
    Protocol,
    competition_grid,
    crossing_rate,
    evaluate,
    icp,
    market_share_censor,
    mil,
    predict_quantiles,
    provider_stations,
    quantiles_from_gaussian,
    run_competition_cell,
    run_experiment,
    run_total_demand_cell,
    summarize,
    tilted_loss_sum,
    total_demand_grid,
)
from utils.losses_training import ModelKind, TrainConfig, make_windows, scale_panel
from utils.panel import DemandPanel
from utils.spatial_graph import ClusterAssignment, build_adjacency
from utils.tgcn_model import TgcnConfig, init_params

START = 1567382400


def test_interval_coverage():
    assert icp([0.0, 2.0], [1.0, 3.0], [1.0, 5.0]) == 0.5
    assert icp([0.0], [1.0], [0.0]) == 1.0
    assert mil([0.0, 2.0], [1.0, 5.0]) == 2.0
    with pytest.raises(DomainError):
        icp([0.0], [1.0], [0.0, 1.0])
    with pytest.raises(DomainError):
        mil([], [])


def test_gaussian_quantiles():
    q = quantiles_from_gaussian(np.array([0.0]), np.array([1.0]), (0.05, 0.5, 0.95))
    assert np.allclose(q, [[-1.6448536, 0.0, 1.6448536]])


def test_degenerate_gaussian_interval():
    q = quantiles_from_gaussian(np.array([2.0, 2.0]), np.zeros(2), (0.05, 0.95))
    assert np.all(q == 2.0)
    assert mil(q[:, 0], q[:, 1]) == 0.0
    assert icp(q[:, 0], q[:, 1], [2.0, 2.5]) == 0.5
    with pytest.raises(DomainError):
        quantiles_from_gaussian(np.zeros(1), -np.ones(1), (0.5,))


def test_crossing_rate():
    q = np.array([[[0.0, 1.0, 2.0]], [[0.0, 2.0, 1.0]]])
    assert crossing_rate(q) == 0.5
    assert crossing_rate(np.zeros((3, 2, 1))) == 0.0


def test_tilted_loss_sum_adds_up_nodes():
    y = np.array([[1.0, 0.0]])
    q = np.array([[[0.0, 2.0], [0.0, 0.0]]])
    total, per_node = tilted_loss_sum(y, q, (0.1, 0.9))
    # node 0: (0.1 * 1 + 0.1 * 1) / 2
    assert per_node.tolist() == pytest.approx([0.1, 0.0])
    assert total == pytest.approx(0.1)
    with pytest.raises(DomainError):
        tilted_loss_sum(y, q, (0.5,))


def test_provider_stations():
    ids = [f"s{i}" for i in range(10)]
    assert provider_stations(ids, 1.0, seed=0) == ids
    chosen = provider_stations(ids, 0.25, seed=3)
    assert len(chosen) == 3
    assert chosen == provider_stations(ids, 0.25, seed=3)
    with pytest.raises(DomainError):
        provider_stations(ids, 0.0, seed=0)


def station_setup():
    rng = np.random.default_rng(0)
    demand = rng.uniform(0, 5, size=(6, 48))
    panel = DemandPanel.from_demand([f"s{i}" for i in range(6)], START, demand, demand)
    clusters = ClusterAssignment(2, [(0.0, 0.0), (1.0, 1.0)], {f"s{i}": i % 2 for i in range(6)})
    return panel, clusters


def test_full_market_share_sees_everything():
    panel, clusters = station_setup()
    cluster_panel = market_share_censor(panel, clusters, 1.0, seed=0)
    assert np.array_equal(cluster_panel.observed, cluster_panel.true)
    assert not cluster_panel.censored.any()


def test_market_share_conserves_true_demand():
    panel, clusters = station_setup()
    cluster_panel = market_share_censor(panel, clusters, 0.5, seed=1)
    assert cluster_panel.node_ids == ("0", "1")
    assert np.allclose(cluster_panel.true[0], panel.true[[0, 2, 4]].sum(axis=0))
    assert np.allclose(cluster_panel.true[1], panel.true[[1, 3, 5]].sum(axis=0))
    assert np.all(cluster_panel.observed <= cluster_panel.true)

    provider = provider_stations(panel.node_ids, 0.5, seed=1)
    others = [i for i, s in enumerate(panel.node_ids) if s not in provider]
    assert np.allclose(cluster_panel.lost().sum(), panel.true[others].sum())


def test_market_share_needs_every_station_clustered():
    panel, _ = station_setup()
    with pytest.raises(ValidationError):
        market_share_censor(panel, ClusterAssignment(1, [(0.0, 0.0)], {"s0": 0}), 0.5, seed=0)


def test_evaluation_scores_against_true_demand(make_panel):
    panel = make_panel(k=3, n_hours=120, censor_rate=0.5)
    dataset = make_windows(scale_panel(panel, 12, (0.8, 0.1, 0.1)), 12)
    config = TgcnConfig(n_nodes=3, channels=(4, 2), hidden=6)
    params = init_params(config, seed=2)
    A = np.full((3, 3), 1 / 3)

    report = evaluate("tobit", params, config, A, dataset.test, dataset.scaler, dataset.node_ids, seed=2, protocol="manual")
    q = predict_quantiles(params, config, A, dataset.test.inputs)
    assert report.icp == pytest.approx(icp(q[..., 0], q[..., -1], dataset.test.true))
    assert report.n_samples == len(dataset.test)
    assert report.most_censored_node in dataset.node_ids
    assert set(report.per_node) == {"0", "1", "2"}
    assert report.mil_kwh == pytest.approx(np.mean(np.abs(q[..., -1] - q[..., 0]) * dataset.scaler.span))
    assert report.to_row()["seed"] == 2
    assert "per_node" not in report.to_row()


def test_evaluation_needs_matching_nodes(make_panel):
    dataset = make_windows(scale_panel(make_panel(k=2, n_hours=60), 6, (0.8, 0.1, 0.1)), 6)
    config = TgcnConfig(n_nodes=3, channels=(4, 2), hidden=6)
    with pytest.raises(ValidationError):
        evaluate("qr", init_params(config), config, np.eye(3), dataset.test, dataset.scaler, dataset.node_ids)


def test_grids():
    grid = total_demand_grid(["gas_station", "first_come"], [0.01, 0.05], ["tobit", "qr"])
    assert len(grid) == 8
    assert grid[0] == ExperimentCell(Protocol.TOTAL_DEMAND, ModelKind.TOBIT, queue="gas_station", penetration=0.01)
    assert len(competition_grid([0.1, 0.5, 0.9], ["gaussian"])) == 3


def fake_report(cell, seed):
    return EvalReport(
        model_kind=cell.model_kind.value,
        tilted_loss_sum=float(seed),
        icp=0.9,
        mil=0.2,
        icp_most_censored=0.8,
        most_censored_node="0",
        crossing_rate=0.0,
        tilted_loss_kwh=10.0 * seed,
        mil_kwh=2.0,
        n_samples=10,
        protocol=cell.protocol.value,
        market_share=cell.market_share,
        seed=seed,
    )


def test_experiment_runs_every_cell_and_seed():
    grid = competition_grid([0.25, 0.75], ["tobit", "censored_qr"])
    result = run_experiment("competition", grid, [0, 1, 2], fake_report)
    assert len(result.reports) == 12
    assert len(result.summary) == 4
    assert result.summary["n_seeds"].tolist() == [3, 3, 3, 3]
    assert result.summary["tilted_loss_sum_mean"].tolist() == pytest.approx([1.0] * 4)
    assert result.summary["tilted_loss_sum_std"].tolist() == pytest.approx([1.0] * 4)
    assert len(result.reports_frame()) == 12


def test_single_seed_std_is_flagged():
    summary = summarize([fake_report(ExperimentCell(Protocol.COMPETITION, ModelKind.QR, market_share=0.5), 4)])
    assert summary["std_defined"].tolist() == [False]
    assert summary["icp_std"].tolist() == [0.0]


def test_experiment_input_checks():
    grid = competition_grid([0.5], ["qr"])
    with pytest.raises(ValidationError):
        run_experiment("competition", [], [0], fake_report)
    with pytest.raises(ValidationError):
        run_experiment("competition", grid, [], fake_report)
    with pytest.raises(ValidationError):
        run_experiment("total_demand", grid, [0], fake_report)


# Model outcomes at the small training configuration. Each run trains tens of
# T-GCNs, so they only run with -m slow.

SMALL_TRAIN = TrainConfig(lr=0.005, batch_size=128, max_epochs=300, early_stop_delta=1e-4, early_stop_patience=15, window=24)
SMALL_MODEL = TgcnConfig(channels=(8, 8), hidden=16)
FIVE_SEEDS = [0, 1, 2, 3, 4]
JOBS = 4


def pooled_std(summary, first, second):
    return float(np.sqrt((summary.loc[first, "tilted_loss_sum_std"] ** 2 + summary.loc[second, "tilted_loss_sum_std"] ** 2) / 2))


def total_demand_runs(panel, kinds, seeds):
    A_hat = build_adjacency([(55.60 + 0.03 * i, 12.50 + 0.02 * (i % 2)) for i in range(panel.n_nodes)]).A_hat
    run_cell = partial(
        run_total_demand_cell,
        panels={("synthetic", 0.0): panel},
        A_hat=A_hat,
        train_config=SMALL_TRAIN,
        model_config=SMALL_MODEL,
    )
    grid = total_demand_grid(["synthetic"], [0.0], kinds)
    return run_experiment("total_demand", grid, seeds, run_cell, jobs=JOBS).summary.set_index("model_kind")


@pytest.mark.slow
def test_censored_models_recover_latent_demand(make_panel):
    panel = make_panel(k=6, n_hours=3000, censor_rate=0.4, seed=21)
    summary = total_demand_runs(panel, ["qr", "censored_qr", "gaussian", "tobit"], FIVE_SEEDS)
    loss = summary["tilted_loss_sum_mean"]
    assert loss["qr"] - loss["censored_qr"] > pooled_std(summary, "qr", "censored_qr")
    assert loss["gaussian"] - loss["tobit"] > pooled_std(summary, "gaussian", "tobit")


@pytest.mark.slow
def test_intervals_are_calibrated_without_censoring(make_panel):
    panel = make_panel(k=6, n_hours=3000, censor_rate=0.0, seed=21)
    summary = total_demand_runs(panel, ["qr", "gaussian"], [0, 1, 2])
    assert 0.80 <= summary.loc["qr", "icp_mean"] <= 0.97
    assert 0.82 <= summary.loc["gaussian", "icp_mean"] <= 0.97
    assert (summary["mil_mean"] > 0).all()


def sparse_station_market(n_clusters=6, per_cluster=8, n_hours=3000, seed=0):
    """Stations with a few charging sessions a day each, grouped into clusters."""
    rng = np.random.default_rng(seed)
    hours = np.arange(n_hours)
    sessions_per_hour = 0.25 * (1 + 0.8 * np.sin(2 * np.pi * (hours - 8) / 24))
    n = n_clusters * per_cluster
    sessions = rng.poisson(sessions_per_hour[None, :] * rng.uniform(0.5, 1.5, size=(n, 1)))
    demand = sessions * rng.uniform(5.0, 25.0, size=(n, n_hours))
    ids = [f"s{i:02d}" for i in range(n)]
    panel = DemandPanel.from_demand(ids, START, demand, demand)
    centroids = [(55.60 + 0.03 * c, 12.50 + 0.02 * (c % 2)) for c in range(n_clusters)]
    clusters = ClusterAssignment(n_clusters, centroids, {s: i // per_cluster for i, s in enumerate(ids)})
    return panel, clusters, build_adjacency(centroids).A_hat


@pytest.mark.slow
def test_competition_gap_closes_as_the_provider_grows():
    station_panel, clusters, A_hat = sparse_station_market()
    run_cell = partial(
        run_competition_cell,
        station_panel=station_panel,
        clusters=clusters,
        A_hat=A_hat,
        train_config=SMALL_TRAIN,
        model_config=SMALL_MODEL,
    )
    grid = competition_grid([0.25, 0.95], ["qr", "censored_qr"])
    summary = run_experiment("competition", grid, FIVE_SEEDS, run_cell, jobs=JOBS).summary

    for share, wide_gap in ((0.25, True), (0.95, False)):
        cells = summary[summary["market_share"] == share].set_index("model_kind")
        gap = cells.loc["qr", "tilted_loss_sum_mean"] - cells.loc["censored_qr", "tilted_loss_sum_mean"]
        if wide_gap:
            assert gap > pooled_std(cells, "qr", "censored_qr")
        else:
            assert abs(gap) < pooled_std(cells, "qr", "censored_qr")

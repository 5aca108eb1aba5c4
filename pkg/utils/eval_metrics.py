"""
Forecast evaluation against true (latent) demand, and the two experiment protocols:
total demand across queue policies and penetration rates, and competing providers.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable, Mapping, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import stats

from utils.errors import DomainError, ValidationError
from utils.losses_training import (
    ModelKind,
    NodeScaler,
    TrainConfig,
    WindowSplit,
    make_windows,
    scale_panel,
    train,
)
from utils.panel import DemandPanel
from utils.spatial_graph import ClusterAssignment
from utils.tgcn_model import HeadKind, TgcnConfig, TgcnParams, tgcn_forward

CROSSING_WARN_RATE = 0.10


class Protocol(str, Enum):
    TOTAL_DEMAND = "total_demand"
    COMPETITION = "competition"


def _aligned(*arrays) -> list[np.ndarray]:
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    if len({a.shape for a in arrays}) != 1:
        raise DomainError(f"arrays are not aligned: shapes {[a.shape for a in arrays]}")
    return arrays


def icp(q_low, q_high, y_true) -> float:
    """Share of true values inside the closed interval [q_low, q_high]."""
    q_low, q_high, y_true = _aligned(q_low, q_high, y_true)
    if y_true.size == 0:
        raise DomainError("icp of an empty sample")
    return float(np.mean((q_low <= y_true) & (y_true <= q_high)))


def mil(q_low, q_high) -> float:
    q_low, q_high = _aligned(q_low, q_high)
    if q_low.size == 0:
        raise DomainError("mil of an empty sample")
    return float(np.mean(np.abs(q_high - q_low)))


def quantiles_from_gaussian(mu, sigma, quantiles: Sequence[float]) -> np.ndarray:
    """Quantiles of N(mu, sigma^2), stacked on a new trailing axis."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise DomainError("sigma must be >= 0")
    z = stats.norm.ppf(np.asarray(quantiles, dtype=np.float64))
    return mu[..., None] + sigma[..., None] * z


def crossing_rate(quantiles: np.ndarray) -> float:
    """Share of (sample, node) forecasts whose quantiles are not non-decreasing."""
    quantiles = np.asarray(quantiles, dtype=np.float64)
    if quantiles.shape[-1] < 2 or quantiles.size == 0:
        return 0.0
    crossed = np.any(np.diff(quantiles, axis=-1) < 0, axis=-1)
    return float(np.mean(crossed))


def pinball(y, f, q: float) -> np.ndarray:
    e = np.asarray(y, dtype=np.float64) - np.asarray(f, dtype=np.float64)
    return np.maximum(q * e, (q - 1) * e)


def tilted_loss_sum(y_true, quantiles: np.ndarray, levels: Sequence[float]) -> tuple[float, np.ndarray]:
    """
    Tilted loss summed over nodes, averaged over samples and quantile levels.

    y_true is (n, k), quantiles is (n, k, |Q|). Also returns the per-node values.
    """
    y_true = np.asarray(y_true, dtype=np.float64)
    quantiles = np.asarray(quantiles, dtype=np.float64)
    if quantiles.shape != y_true.shape + (len(levels),):
        raise DomainError(f"quantiles of shape {quantiles.shape} do not match targets {y_true.shape} x {len(levels)} levels")
    per_level = np.stack([pinball(y_true, quantiles[..., j], q) for j, q in enumerate(levels)], axis=-1)
    per_node = per_level.mean(axis=(0, 2))
    return float(per_node.sum()), per_node


@dataclass
class EvalReport:
    model_kind: str
    tilted_loss_sum: float
    icp: float
    mil: float
    icp_most_censored: float
    most_censored_node: str
    crossing_rate: float
    tilted_loss_kwh: float
    mil_kwh: float
    n_samples: int
    protocol: str = ""
    queue: str | None = None
    penetration: float | None = None
    market_share: float | None = None
    seed: int | None = None
    per_node: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_row(self) -> dict:
        row = asdict(self)
        row.pop("per_node")
        return row


def predict_quantiles(
    params: TgcnParams, config: TgcnConfig, A_hat, inputs: np.ndarray, batch_size: int = 256
) -> np.ndarray:
    """(n, k, |Q|) quantile forecasts; Gaussian heads are converted through the normal inverse CDF."""
    frozen = TgcnParams.from_arrays(params.to_arrays())
    for t in frozen.tensors():
        t.requires_grad = False
    chunks = []
    for lo in range(0, len(inputs), batch_size):
        heads = tgcn_forward(A_hat, inputs[lo: lo + batch_size], frozen, config)
        if config.head is HeadKind.GAUSSIAN:
            chunks.append(quantiles_from_gaussian(heads.mu.values, heads.sigma.values, config.quantiles))
        else:
            chunks.append(heads.quantiles.values)
    if not chunks:
        return np.empty((0, config.n_nodes, len(config.quantiles)))
    return np.concatenate(chunks, axis=0)


def evaluate(
    kind: ModelKind | str,
    params: TgcnParams,
    config: TgcnConfig,
    A_hat,
    split: WindowSplit,
    scaler: NodeScaler,
    node_ids: Sequence[str],
    **metadata,
) -> EvalReport:
    """
    Score forecasts on a split against its TRUE demand, never the observed one.

    The interval is the outermost quantile pair.
    """
    kind = ModelKind.parse(kind)
    if len(split) == 0:
        raise ValidationError("evaluation split is empty")
    if split.true.shape[1] != config.n_nodes:
        raise ValidationError(f"model has {config.n_nodes} nodes, data has {split.true.shape[1]}")

    q = predict_quantiles(params, config, A_hat, split.inputs)
    y = split.true
    levels = config.quantiles
    lo, hi = q[..., 0], q[..., -1]

    total, per_node_loss = tilted_loss_sum(y, q, levels)
    crossing = crossing_rate(q)
    if crossing > CROSSING_WARN_RATE:
        logging.warning("%s: %.1f%% of forecasts have crossing quantiles", kind.value, 100 * crossing)

    censored_share = split.censored.mean(axis=0)
    worst = int(np.argmax(censored_share))

    # kWh view: undo the per-node scaling, node axis last
    y_kwh = scaler.inverse(y)
    q_kwh = np.moveaxis(scaler.inverse(np.moveaxis(q, -1, 0)), 0, -1)
    total_kwh, _ = tilted_loss_sum(y_kwh, q_kwh, levels)

    per_node = {
        str(node): {
            "tilted_loss": float(per_node_loss[v]),
            "icp": icp(lo[:, v], hi[:, v], y[:, v]),
            "mil": mil(lo[:, v], hi[:, v]),
            "censored_share": float(censored_share[v]),
        }
        for v, node in enumerate(node_ids)
    }
    return EvalReport(
        model_kind=kind.value,
        tilted_loss_sum=total,
        icp=icp(lo, hi, y),
        mil=mil(lo, hi),
        icp_most_censored=icp(lo[:, worst], hi[:, worst], y[:, worst]),
        most_censored_node=str(node_ids[worst]),
        crossing_rate=crossing,
        tilted_loss_kwh=total_kwh,
        mil_kwh=float(np.mean(scaler.inverse_width(np.abs(hi - lo)))),
        n_samples=len(split),
        per_node=per_node,
        **metadata,
    )


def provider_stations(station_ids: Sequence[str], share: float, seed: int) -> list[str]:
    """ceil(share * #stations) stations drawn without replacement."""
    if not 0 < share <= 1:
        raise DomainError(f"provider share must be in (0, 1], got {share}")
    n = len(station_ids)
    n_provider = min(n, max(1, math.ceil(share * n - 1e-9)))
    chosen = np.random.default_rng(seed).choice(n, size=n_provider, replace=False)
    return [station_ids[i] for i in sorted(chosen)]


def market_share_censor(
    station_panel: DemandPanel, clusters: ClusterAssignment, share: float, seed: int
) -> DemandPanel:
    """
    Cluster panel as one provider sees it: observed demand is what reached the
    provider's stations, true demand is what reached every station.
    """
    provider = set(provider_stations(station_panel.node_ids, share, seed))
    try:
        cluster_of = np.array([clusters.station_to_cluster[s] for s in station_panel.node_ids])
    except KeyError as e:
        raise ValidationError(f"station {e.args[0]} has no cluster") from None

    demand = station_panel.true
    mask = np.array([s in provider for s in station_panel.node_ids], dtype=np.float64)
    membership = (cluster_of[None, :] == np.arange(clusters.k)[:, None]).astype(np.float64)
    observed = membership @ (demand * mask[:, None])
    true = membership @ demand
    return DemandPanel.from_demand([str(c) for c in range(clusters.k)], station_panel.start, observed, true)


@dataclass(frozen=True)
class ExperimentCell:
    protocol: Protocol
    model_kind: ModelKind
    queue: str | None = None
    penetration: float | None = None
    market_share: float | None = None

    def key(self) -> tuple:
        return (self.protocol.value, self.queue, self.penetration, self.market_share, self.model_kind.value)


def total_demand_grid(queues: Sequence[str], penetrations: Sequence[float], model_kinds: Sequence[str]) -> list[ExperimentCell]:
    return [
        ExperimentCell(Protocol.TOTAL_DEMAND, ModelKind.parse(m), queue=q, penetration=float(p))
        for q in queues for p in penetrations for m in model_kinds
    ]


def competition_grid(shares: Sequence[float], model_kinds: Sequence[str]) -> list[ExperimentCell]:
    return [
        ExperimentCell(Protocol.COMPETITION, ModelKind.parse(m), market_share=float(s))
        for s in shares for m in model_kinds
    ]


def fit_and_evaluate(
    panel: DemandPanel,
    A_hat,
    cell: ExperimentCell,
    seed: int,
    train_config: TrainConfig,
    model_config: TgcnConfig,
) -> EvalReport:
    """Scale, window, train one model and score it on the test split."""
    scaled = scale_panel(panel, train_config.window, train_config.split)
    dataset = make_windows(scaled, train_config.window, train_config.split)
    result = train(cell.model_kind, dataset, train_config, A_hat, model_config, seed=seed)
    return evaluate(
        cell.model_kind,
        result.params,
        result.config,
        A_hat,
        dataset.test,
        dataset.scaler,
        dataset.node_ids,
        protocol=cell.protocol.value,
        queue=cell.queue,
        penetration=cell.penetration,
        market_share=cell.market_share,
        seed=seed,
    )


def run_total_demand_cell(
    cell: ExperimentCell,
    seed: int,
    panels: Mapping[tuple[str, float], DemandPanel],
    A_hat,
    train_config: TrainConfig,
    model_config: TgcnConfig,
) -> EvalReport:
    try:
        panel = panels[(cell.queue, cell.penetration)]
    except KeyError:
        raise ValidationError(f"no panel for queue {cell.queue} at penetration {cell.penetration}") from None
    return fit_and_evaluate(panel, A_hat, cell, seed, train_config, model_config)


def run_competition_cell(
    cell: ExperimentCell,
    seed: int,
    station_panel: DemandPanel,
    clusters: ClusterAssignment,
    A_hat,
    train_config: TrainConfig,
    model_config: TgcnConfig,
) -> EvalReport:
    # provider stations follow the seed, so a seed fixes both the market and the model
    panel = market_share_censor(station_panel, clusters, cell.market_share, seed)
    return fit_and_evaluate(panel, A_hat, cell, seed, train_config, model_config)


SUMMARY_METRICS = ("tilted_loss_sum", "icp", "mil", "icp_most_censored", "crossing_rate", "tilted_loss_kwh", "mil_kwh")


@dataclass
class ExperimentResult:
    reports: list[EvalReport]
    summary: pd.DataFrame

    def reports_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.to_row() for r in self.reports])


def summarize(reports: Sequence[EvalReport]) -> pd.DataFrame:
    """Mean and sample std per grid cell; a single seed reports std 0 with std_defined False."""
    frame = pd.DataFrame([r.to_row() for r in reports])
    keys = ["protocol", "queue", "penetration", "market_share", "model_kind"]
    rows = []
    for key, group in frame.groupby(keys, dropna=False, sort=False):
        row = dict(zip(keys, key))
        row["n_seeds"] = len(group)
        row["std_defined"] = len(group) > 1
        for metric in SUMMARY_METRICS:
            values = group[metric].to_numpy(dtype=np.float64)
            row[f"{metric}_mean"] = float(values.mean())
            row[f"{metric}_std"] = float(values.std(ddof=1)) if len(values) > 1 else 0.0
        rows.append(row)
    return pd.DataFrame(rows)


def run_experiment(
    protocol: Protocol | str,
    grid: Sequence[ExperimentCell],
    seeds: Sequence[int],
    run_cell: Callable[[ExperimentCell, int], EvalReport],
    jobs: int = 1,
) -> ExperimentResult:
    """
    Evaluate every (cell, seed) pair, in parallel when jobs > 1.

    `run_cell` must be picklable for jobs > 1, e.g. a functools.partial of
    run_total_demand_cell or run_competition_cell.
    """
    protocol = Protocol(protocol)
    if not grid:
        raise ValidationError("experiment grid is empty")
    if not seeds:
        raise ValidationError("experiment needs at least one seed")
    if any(cell.protocol is not protocol for cell in grid):
        raise ValidationError(f"grid mixes cells from other protocols than {protocol.value}")

    tasks = [(cell, int(seed)) for cell in grid for seed in seeds]
    logging.info("%s experiment: %s cells x %s seeds on %s job(s)", protocol.value, len(grid), len(seeds), jobs)
    if jobs == 1:
        reports = [run_cell(cell, seed) for cell, seed in tasks]
    else:
        reports = Parallel(n_jobs=jobs)(delayed(run_cell)(cell, seed) for cell, seed in tasks)

    summary = summarize(reports)
    if not summary["std_defined"].all():
        logging.warning("Some cells ran with a single seed; their std is reported as 0")
    return ExperimentResult(list(reports), summary)


"""compete: forecast demand as one provider among competitors, across market shares."""

import dataclasses
import logging
from dataclasses import dataclass
from functools import partial
from pathlib import Path

from commands.common import (
    GridSettings,
    add_common_args,
    add_grid_args,
    db_url,
    load_graph,
    prepare_out_dir,
    require_file,
    write_experiment,
)
from commands.train import load_train_settings
from models import record_reports
from utils.config import from_mapping, load_config, resolve_seed
from utils.errors import ValidationError
from utils.eval_metrics import Protocol, competition_grid, run_competition_cell, run_experiment
from utils.manifest import RunManifest
from utils.panel import DemandPanel
from utils.spatial_graph import read_clusters


@dataclass(frozen=True)
class CompeteSettings(GridSettings):
    shares: tuple[float, ...] = (0.10, 0.25, 0.50, 0.75, 0.95)

    def __post_init__(self):
        super().__post_init__()
        if not self.shares or any(not 0 < s <= 1 for s in self.shares):
            raise ValidationError(f"market shares must lie in (0, 1], got {self.shares}")


def register(subparsers) -> None:
    parser = subparsers.add_parser("compete", help="market-share experiment on a station panel")
    add_common_args(parser)
    add_grid_args(parser)
    parser.add_argument("--station-panel", type=Path, required=True, help="station panel CSV from simulate")
    parser.add_argument("--clusters", type=Path, required=True, help="station-to-cluster CSV from simulate")
    parser.add_argument("--shares", nargs="+", type=float, help="provider market shares")
    parser.set_defaults(handler=run)


def grid_overrides(args, extra: dict) -> dict:
    overrides = {key: value for key, value in extra.items() if value is not None}
    if args.model_kinds:
        overrides["model_kinds"] = tuple(args.model_kinds)
    if args.n_seeds is not None:
        overrides["n_seeds"] = args.n_seeds
    if args.jobs is not None:
        overrides["jobs"] = args.jobs
    return overrides


def run(args) -> int:
    config = load_config(args.config)
    section = config["compete"]
    settings = from_mapping(CompeteSettings, {k: v for k, v in section.items() if k != "seed"}, "compete")
    overrides = grid_overrides(args, {"shares": tuple(args.shares) if args.shares else None})
    if overrides:
        settings = dataclasses.replace(settings, **overrides)
    base_seed = resolve_seed(args.seed, section)
    seeds = [base_seed + i for i in range(settings.n_seeds)]
    train_config, model_config = load_train_settings(config, base_seed, args.epochs)

    station_panel = DemandPanel.read_csv(require_file(args.station_panel, "station panel"))
    clusters = read_clusters(require_file(args.clusters, "cluster file"))
    A_hat = load_graph(args.adjacency, clusters.k)
    out = prepare_out_dir(args.out)

    grid = competition_grid(settings.shares, settings.model_kinds)
    logging.info("compete: shares %s, models %s, seeds %s", settings.shares, settings.model_kinds, seeds)
    run_cell = partial(
        run_competition_cell,
        station_panel=station_panel,
        clusters=clusters,
        A_hat=A_hat,
        train_config=train_config,
        model_config=model_config,
    )
    result = run_experiment(Protocol.COMPETITION, grid, seeds, run_cell, jobs=settings.jobs)

    manifest = RunManifest.start(
        "compete",
        config | {"resolved": dataclasses.asdict(settings), "epochs": train_config.max_epochs},
        seeds,
        [args.station_panel, args.clusters, args.adjacency if args.adjacency and args.adjacency.is_file() else None],
    )
    write_experiment(result, out, manifest)
    if args.db is not None:
        logging.info("Stored %s report(s) in the results database", record_reports(result.reports, db_url(args.db)))
    manifest.write(out)
    logging.info("compete: %s runs over %s cells", len(result.reports), len(grid))
    return 0

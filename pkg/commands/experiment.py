"""experiment: the total-demand protocol over the panels of a simulate run."""

import dataclasses
import json
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
from commands.compete import grid_overrides
from commands.simulate import SCENARIOS_NAME
from commands.train import load_train_settings
from models import record_reports
from utils.config import from_mapping, load_config, resolve_seed
from utils.errors import ValidationError
from utils.eval_metrics import Protocol, run_experiment, run_total_demand_cell, total_demand_grid
from utils.manifest import RunManifest
from utils.panel import DemandPanel
from utils.queue_engine import QueuePolicy


@dataclass(frozen=True)
class ExperimentSettings(GridSettings):
    # empty means every scenario simulate produced
    queues: tuple[str, ...] = ()
    penetrations: tuple[float, ...] = ()


def register(subparsers) -> None:
    parser = subparsers.add_parser("experiment", help="total-demand experiment over simulated panels")
    add_common_args(parser)
    add_grid_args(parser)
    parser.add_argument("--sim-dir", type=Path, required=True, help="output directory of a simulate run")
    parser.add_argument("--queues", nargs="+", help="queue policies to include")
    parser.add_argument("--penetrations", nargs="+", type=float, help="penetration rates to include")
    parser.set_defaults(handler=run)


def load_scenarios(sim_dir: Path) -> list[dict]:
    index_path = require_file(sim_dir / SCENARIOS_NAME, "scenario index")
    try:
        scenarios = json.loads(index_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValidationError(f"{index_path}:{e.lineno}: invalid JSON: {e.msg}") from e
    for entry in scenarios:
        entry["queue"] = QueuePolicy.parse(entry["queue"]).value
        entry["penetration"] = float(entry["penetration"])
    return scenarios


def select_scenarios(scenarios: list[dict], queues, penetrations) -> list[dict]:
    queues = {QueuePolicy.parse(q).value for q in queues}
    chosen = [
        s for s in scenarios
        if (not queues or s["queue"] in queues) and (not penetrations or s["penetration"] in penetrations)
    ]
    if not chosen:
        raise ValidationError("no simulated scenario matches the requested queues and penetrations")
    return chosen


def run(args) -> int:
    config = load_config(args.config)
    section = config["experiment"]
    settings = from_mapping(ExperimentSettings, {k: v for k, v in section.items() if k != "seed"}, "experiment")
    overrides = grid_overrides(
        args,
        {
            "queues": tuple(args.queues) if args.queues else None,
            "penetrations": tuple(args.penetrations) if args.penetrations else None,
        },
    )
    if overrides:
        settings = dataclasses.replace(settings, **overrides)
    base_seed = resolve_seed(args.seed, section)
    seeds = [base_seed + i for i in range(settings.n_seeds)]
    train_config, model_config = load_train_settings(config, base_seed, args.epochs)

    scenarios = select_scenarios(load_scenarios(args.sim_dir), settings.queues, [float(p) for p in settings.penetrations])
    panels = {
        (s["queue"], s["penetration"]): DemandPanel.read_csv(require_file(args.sim_dir / s["panel"], "panel file"))
        for s in scenarios
    }
    n_nodes = next(iter(panels.values())).n_nodes
    adjacency = args.adjacency or args.sim_dir / "adjacency.csv"
    A_hat = load_graph(adjacency, n_nodes)
    out = prepare_out_dir(args.out)

    queues = sorted({q for q, _ in panels})
    penetrations = sorted({p for _, p in panels})
    grid = [
        cell for cell in total_demand_grid(queues, penetrations, settings.model_kinds)
        if (cell.queue, cell.penetration) in panels
    ]
    logging.info("experiment: %s scenario(s), models %s, seeds %s", len(panels), settings.model_kinds, seeds)
    run_cell = partial(
        run_total_demand_cell,
        panels=panels,
        A_hat=A_hat,
        train_config=train_config,
        model_config=model_config,
    )
    result = run_experiment(Protocol.TOTAL_DEMAND, grid, seeds, run_cell, jobs=settings.jobs)

    manifest = RunManifest.start(
        "experiment",
        config | {"resolved": dataclasses.asdict(settings), "epochs": train_config.max_epochs},
        seeds,
        [args.sim_dir / s["panel"] for s in scenarios] + [adjacency if Path(adjacency).is_file() else None],
    )
    write_experiment(result, out, manifest)
    if args.db is not None:
        logging.info("Stored %s report(s) in the results database", record_reports(result.reports, db_url(args.db)))
    manifest.write(out)
    logging.info("experiment: %s runs over %s cells", len(result.reports), len(grid))
    return 0

"""simulate: counterfactual replay of trips into cluster and station demand panels."""

import json
import logging
from dataclasses import asdict, dataclass
from functools import partial
from pathlib import Path

from joblib import Parallel, delayed

from commands.common import add_common_args, prepare_out_dir
from utils.config import from_mapping, load_config, resolve_seed
from utils.data_ingest import (
    SynthConfig,
    generate_synthetic_stations,
    generate_synthetic_trips,
    load_stations,
    load_trips,
    penetration_subset,
    sample_fleet,
    write_stations,
    write_trips,
)
from utils.errors import ValidationError
from utils.manifest import RunManifest
from utils.plot_utils import (
    censored_points,
    charging_curve_frame,
    create_series_plot,
    demand_profile_frame,
    write_html,
)
from utils.queue_engine import (
    QueuePolicy,
    SimParams,
    aggregate_demand,
    aggregate_station_demand,
    censorship_stats,
    max_plug_occupancy,
    run_counterfactual,
)
from utils.spatial_graph import build_adjacency, kmeans_cluster, write_adjacency, write_clusters

SCENARIOS_NAME = "scenarios.json"


@dataclass(frozen=True)
class SimulateSettings:
    queues: tuple[str, ...] = ("first_come",)
    penetrations: tuple[float, ...] = (0.05,)
    data_penetration: float = 0.05
    n_clusters: int = 6
    bandwidth_km: float = 1.0
    willingness_a: float = 4.0
    willingness_b: float = 2.0
    station_choice_sign: float = -1.0
    willingness_override: float | None = None
    three_hour_cap_h: float = 3.0
    seed: int | None = None

    def __post_init__(self):
        for queue in self.queues:
            QueuePolicy.parse(queue)
        if self.bandwidth_km <= 0:
            raise ValidationError("bandwidth_km must be > 0")

    def sim_params(self) -> SimParams:
        return SimParams(
            willingness_a=self.willingness_a,
            willingness_b=self.willingness_b,
            station_choice_sign=self.station_choice_sign,
            willingness_override=self.willingness_override,
            three_hour_cap_h=self.three_hour_cap_h,
        )


def scenario_tag(queue: str, penetration: float) -> str:
    return f"{QueuePolicy.parse(queue).value}_p{penetration:g}"


def register(subparsers) -> None:
    parser = subparsers.add_parser("simulate", help="replay trips and build demand panels")
    add_common_args(parser)
    parser.add_argument("--trips", type=Path, help="trips CSV; synthetic trips when omitted")
    parser.add_argument("--stations", type=Path, help="stations CSV; synthetic stations when omitted")
    parser.add_argument("--queue", nargs="+", help="gas_station, three_hour and/or first_come")
    parser.add_argument("--penetration", nargs="+", type=float, help="EV penetration rates to simulate")
    parser.add_argument("--clusters", type=int, help="number of station clusters (graph nodes)")
    parser.add_argument("--jobs", type=int, default=1, help="scenarios simulated in parallel")
    parser.add_argument("--html", action="store_true", help="also render demand profiles with plotly")
    parser.set_defaults(handler=run)


def simulate_scenario(trips, fleet, stations, clusters, settings: SimulateSettings, queue: str, penetration: float, seed: int):
    subset = penetration_subset(trips, penetration, settings.data_penetration, seed)
    ledger = run_counterfactual(subset, fleet, stations, queue, settings.sim_params(), seed)
    hours = ledger.hours
    if hours is None:
        raise ValidationError(f"no trips left at penetration {penetration}")
    panel = aggregate_demand(ledger, clusters, hours)
    station_panel = aggregate_station_demand(ledger, [s.station_id for s in stations], hours)
    return ledger, panel, station_panel


def run(args) -> int:
    config = load_config(args.config)
    settings = from_mapping(SimulateSettings, config["simulate"], "simulate")
    overrides = {}
    if args.queue:
        overrides["queues"] = tuple(args.queue)
    if args.penetration:
        overrides["penetrations"] = tuple(args.penetration)
    if args.clusters is not None:
        overrides["n_clusters"] = args.clusters
    if overrides:
        settings = from_mapping(SimulateSettings, asdict(settings) | overrides, "simulate")
    seed = resolve_seed(args.seed, config["simulate"])
    out = prepare_out_dir(args.out)
    logging.info("simulate: queues %s, penetrations %s, seed %s", settings.queues, settings.penetrations, seed)

    manifest = RunManifest.start("simulate", config | {"resolved": asdict(settings)}, [seed], [args.trips, args.stations])
    synth = from_mapping(SynthConfig, config["synthetic"], "synthetic")
    if args.trips:
        trips = load_trips(args.trips)
    else:
        trips = generate_synthetic_trips(synth, seed if synth.seed is None else synth.seed)
        write_trips(trips, out / "trips.csv")
        manifest.add_artifact(out / "trips.csv")
    if args.stations:
        stations = load_stations(args.stations)
    else:
        stations = generate_synthetic_stations(synth, (seed if synth.seed is None else synth.seed) + 1)
        write_stations(stations, out / "stations.csv")
        manifest.add_artifact(out / "stations.csv")

    fleet = sample_fleet({t.vehicle_id for t in trips}, seed=seed)
    clusters = kmeans_cluster(stations, settings.n_clusters, seed=seed)
    write_clusters(clusters, out / "clusters.csv")
    write_adjacency(build_adjacency(clusters.centroids, settings.bandwidth_km), out / "adjacency.csv")
    manifest.add_artifact(out / "clusters.csv")
    manifest.add_artifact(out / "adjacency.csv")

    scenarios = [(QueuePolicy.parse(q).value, float(p)) for q in settings.queues for p in settings.penetrations]
    runner = partial(simulate_scenario, trips, fleet, stations, clusters, settings, seed=seed)
    if args.jobs == 1:
        results = [runner(queue=q, penetration=p) for q, p in scenarios]
    else:
        results = Parallel(n_jobs=args.jobs)(delayed(runner)(queue=q, penetration=p) for q, p in scenarios)

    stats, index = {}, []
    for (queue, penetration), (ledger, panel, station_panel) in zip(scenarios, results):
        tag = scenario_tag(queue, penetration)
        ledger.write_csv(out / f"ledger_{tag}.csv")
        panel.write_csv(out / f"panel_{tag}.csv")
        station_panel.write_csv(out / f"station_panel_{tag}.csv", node_label="station_id")
        demand_profile_frame(panel).to_csv(out / f"profile_{tag}.csv", index=False)
        for name in ("ledger", "panel", "station_panel", "profile"):
            manifest.add_artifact(out / f"{name}_{tag}.csv")

        occupancy = max_plug_occupancy(ledger)
        plugs = {s.station_id: s.plugs for s in stations}
        over = [sid for sid, peak in occupancy.items() if peak > plugs[sid]]
        if over:
            raise ValidationError(f"{tag}: plug occupancy above capacity at {over}")

        stats[tag] = censorship_stats(panel).to_dict() | {
            "queue": queue,
            "penetration": penetration,
            "served": len(ledger.served),
            "lost": len(ledger.lost),
            "depletions": ledger.depletions,
        }
        index.append({
            "queue": queue,
            "penetration": penetration,
            "panel": f"panel_{tag}.csv",
            "station_panel": f"station_panel_{tag}.csv",
            "ledger": f"ledger_{tag}.csv",
        })
        logging.info("%s: %.1f%% of cluster-hours censored", tag, 100 * stats[tag]["overall"])
        if args.html:
            write_html(
                create_series_plot(panel.to_frame().pipe(_panel_series), censored_points(panel), "hour of panel"),
                out / f"panel_{tag}.html",
            )

    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / SCENARIOS_NAME).write_text(json.dumps(index, indent=2) + "\n", encoding="utf-8")
    charging_curve_frame(57.0).to_csv(out / "charging_curves.csv", index=False)
    for name in ("stats.json", SCENARIOS_NAME, "charging_curves.csv"):
        manifest.add_artifact(out / name)
    manifest.write(out)
    logging.info("simulate: %s scenario(s) written to %s", len(scenarios), out)
    return 0


def _panel_series(frame):
    """Tidy observed/true series from a panel frame, x as hour-of-panel."""
    frame = frame.assign(x=frame.groupby("cluster").cumcount())
    long = frame.melt(id_vars=["cluster", "x"], value_vars=["observed_kwh", "true_kwh"], var_name="series")
    return long.rename(columns={"cluster": "node"})[["series", "node", "x", "value"]]

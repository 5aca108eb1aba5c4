"""evaluate: score a trained checkpoint against the true demand of a panel."""

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from commands.common import add_common_args, add_db_arg, db_url, prepare_out_dir, require_file
from models import record_reports
from utils.config import from_mapping, load_config
from utils.errors import ValidationError
from utils.eval_metrics import evaluate, predict_quantiles
from utils.losses_training import NodeScaler, make_windows, scale_panel
from utils.manifest import RunManifest
from utils.panel import DemandPanel
from utils.plot_utils import create_series_plot, forecast_frame, write_html
from utils.tgcn_model import load_checkpoint

SPLITS = ("train", "val", "test", "all")


@dataclass(frozen=True)
class EvaluateSettings:
    split: str = "test"
    batch_size: int = 256

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValidationError(f"split must be one of {SPLITS}, got {self.split!r}")


def register(subparsers) -> None:
    parser = subparsers.add_parser("evaluate", help="score a checkpoint on a panel")
    add_common_args(parser)
    add_db_arg(parser)
    parser.add_argument("--checkpoint", type=Path, required=True, help="checkpoint .npz from train")
    parser.add_argument("--panel", type=Path, required=True, help="cluster panel CSV")
    parser.add_argument("--split", choices=SPLITS, help="which windows to score (default: test)")
    parser.add_argument("--html", action="store_true", help="also render the forecasts with plotly")
    parser.set_defaults(handler=run)


def select_split(scaled, window: int, trained_split, split: str):
    """The windows of one split; "all" scores every window of the panel."""
    if split == "all":
        return make_windows(scaled, window, (1.0, 0.0, 0.0)).train
    return getattr(make_windows(scaled, window, trained_split), split)


def run(args) -> int:
    config = load_config(args.config)
    settings = from_mapping(EvaluateSettings, config["evaluate"], "evaluate")
    split_name = args.split or settings.split
    checkpoint = load_checkpoint(require_file(args.checkpoint, "checkpoint"))
    panel = DemandPanel.read_csv(require_file(args.panel, "panel file"))
    if panel.n_nodes != checkpoint.config.n_nodes:
        raise ValidationError(
            f"checkpoint has {checkpoint.config.n_nodes} nodes, panel {args.panel} has {panel.n_nodes}"
        )
    if tuple(panel.node_ids) != tuple(checkpoint.node_ids):
        logging.warning("Panel node ids %s differ from the checkpoint's %s", panel.node_ids, checkpoint.node_ids)
    out = prepare_out_dir(args.out)

    window = int(checkpoint.meta.get("window", 168))
    trained_split = tuple(checkpoint.meta.get("split", (0.8, 0.1, 0.1)))
    scaler = NodeScaler(np.asarray(checkpoint.node_min), np.asarray(checkpoint.node_max))
    scaled = scale_panel(panel, window, trained_split, scaler=scaler)
    split = select_split(scaled, window, trained_split, split_name)
    logging.info("evaluate: %s checkpoint on %s %s windows", checkpoint.model_kind, len(split), split_name)

    seed = checkpoint.meta.get("seed")
    report = evaluate(
        checkpoint.model_kind,
        checkpoint.params,
        checkpoint.config,
        checkpoint.adjacency,
        split,
        scaler,
        panel.node_ids,
        protocol="single",
        seed=seed,
    )
    manifest = RunManifest.start(
        "evaluate", config | {"split": split_name}, [] if seed is None else [seed], [args.checkpoint, args.panel]
    )

    report_path = out / "report.json"
    report_path.write_text(json.dumps(asdict(report), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    per_node_path = out / "per_node.csv"
    pd.DataFrame.from_dict(report.per_node, orient="index").rename_axis("node").to_csv(per_node_path)

    q = predict_quantiles(checkpoint.params, checkpoint.config, checkpoint.adjacency, split.inputs, settings.batch_size)
    q_kwh = np.moveaxis(scaler.inverse(np.moveaxis(q, -1, 0)), 0, -1)
    forecasts = forecast_frame(
        panel.node_ids, split.hours, scaler.inverse(split.true), scaler.inverse(split.target), q_kwh, checkpoint.config.quantiles
    )
    forecast_path = out / "forecast.csv"
    forecasts.to_csv(forecast_path, index=False)
    for path in (report_path, per_node_path, forecast_path):
        manifest.add_artifact(path)

    if args.html:
        write_html(create_series_plot(forecasts, x_title="target hour (epoch seconds)"), out / "forecast.html")
    if args.db is not None:
        count = record_reports([report], db_url(args.db))
        logging.info("Stored %s report(s) in the results database", count)
    manifest.write(out)

    logging.info(
        "evaluate: tilted loss %.4f, ICP %.3f, MIL %.4f (%.2f kWh)",
        report.tilted_loss_sum, report.icp, report.mil, report.mil_kwh,
    )
    return 0

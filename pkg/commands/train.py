"""train: fit one T-GCN forecaster on a demand panel."""

import dataclasses
import logging
from pathlib import Path

from commands.common import add_common_args, load_graph, prepare_out_dir, require_file
from utils.config import from_mapping, load_config, resolve_seed
from utils.losses_training import ModelKind, TrainConfig, make_windows, scale_panel, train
from utils.manifest import RunManifest
from utils.panel import DemandPanel
from utils.tgcn_model import Checkpoint, TgcnConfig, save_checkpoint


def register(subparsers) -> None:
    parser = subparsers.add_parser("train", help="train a forecaster on a panel")
    add_common_args(parser)
    parser.add_argument("--panel", type=Path, required=True, help="cluster panel CSV from simulate")
    parser.add_argument("--adjacency", type=Path, help="normalized adjacency CSV; identity when omitted")
    parser.add_argument("--model-kind", choices=[k.value for k in ModelKind], default=ModelKind.CENSORED_QR.value)
    parser.add_argument("--epochs", type=int, help="overrides train.max_epochs")
    parser.set_defaults(handler=run)


def load_train_settings(config: dict, seed: int, epochs: int | None) -> tuple[TrainConfig, TgcnConfig]:
    train_config = from_mapping(TrainConfig, config["train"], "train")
    train_config = dataclasses.replace(train_config, seed=seed)
    if epochs is not None:
        train_config = dataclasses.replace(train_config, max_epochs=epochs)
    model_config = from_mapping(TgcnConfig, config["model"], "model")
    return train_config, model_config


def run(args) -> int:
    config = load_config(args.config)
    seed = resolve_seed(args.seed, config["train"])
    train_config, model_config = load_train_settings(config, seed, args.epochs)
    kind = ModelKind.parse(args.model_kind)
    panel = DemandPanel.read_csv(require_file(args.panel, "panel file"))
    out = prepare_out_dir(args.out)
    logging.info("train: %s on %s nodes x %s hours, seed %s", kind.value, panel.n_nodes, panel.n_hours, seed)

    A_hat = load_graph(args.adjacency, panel.n_nodes)
    scaled = scale_panel(panel, train_config.window, train_config.split)
    dataset = make_windows(scaled, train_config.window, train_config.split)
    result = train(kind, dataset, train_config, A_hat, model_config, seed=seed)

    manifest = RunManifest.start(
        "train",
        config | {"model_kind": kind.value, "resolved": dataclasses.asdict(train_config)},
        [seed],
        [args.panel, args.adjacency if args.adjacency and args.adjacency.is_file() else None],
    )
    checkpoint_path = out / f"checkpoint_{kind.value}.npz"
    save_checkpoint(
        checkpoint_path,
        Checkpoint(
            params=result.params,
            config=result.config,
            model_kind=kind.value,
            node_ids=dataset.node_ids,
            node_min=dataset.scaler.node_min,
            node_max=dataset.scaler.node_max,
            adjacency=A_hat,
            meta={
                "window": train_config.window,
                "split": list(train_config.split),
                "seed": seed,
                "best_epoch": result.best_epoch,
            },
        ),
    )
    history_path = out / f"history_{kind.value}.csv"
    result.history_frame().to_csv(history_path, index=False)
    manifest.add_artifact(checkpoint_path)
    manifest.add_artifact(history_path)
    manifest.write(out)
    logging.info("train: best epoch %s of %s", result.best_epoch, len(result.history))
    return 0

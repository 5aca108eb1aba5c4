"""Argument and file helpers shared by the commands."""

import argparse
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from utils.errors import ValidationError
from utils.losses_training import ModelKind
from utils.spatial_graph import read_adjacency


def add_common_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="YAML run config")
    parser.add_argument("--seed", type=int, help="overrides the config seed and LATENT_DEMAND_SEED")
    parser.add_argument("--out", type=Path, default=Path("out"), help="output directory")


def add_db_arg(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--db", nargs="?", const="", default=None, metavar="URL",
                        help="store reports in a results database (default URL from LATENT_DEMAND_DB)")


def require_file(path: Path | None, what: str) -> Path:
    if path is None:
        raise ValidationError(f"missing {what}")
    if not Path(path).is_file():
        raise ValidationError(f"{what} not found: {path}")
    return Path(path)


def prepare_out_dir(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


def load_graph(path: Path | None, n_nodes: int) -> np.ndarray:
    """Normalized adjacency from a CSV; without one the nodes are independent."""
    if path is None or not Path(path).is_file():
        logging.warning("No adjacency file%s; using the identity graph", f" at {path}" if path else "")
        return np.eye(n_nodes)
    A_hat = read_adjacency(path)
    if A_hat.shape[0] != n_nodes:
        raise ValidationError(f"{path}: adjacency has {A_hat.shape[0]} nodes, panel has {n_nodes}")
    return A_hat


def db_url(arg: str | None) -> str | None:
    """--db given without a URL means the default database."""
    if arg is None:
        return None
    return arg or None


@dataclass(frozen=True)
class GridSettings:
    """What the experiment commands share: which models and how many seeded runs per cell."""
    model_kinds: tuple[str, ...] = tuple(k.value for k in ModelKind)
    n_seeds: int = 10
    jobs: int = 1

    def __post_init__(self):
        for kind in self.model_kinds:
            ModelKind.parse(kind)
        if self.n_seeds < 1 or self.jobs == 0:
            raise ValidationError("n_seeds must be >= 1 and jobs non-zero")


def add_grid_args(parser: argparse.ArgumentParser) -> None:
    add_db_arg(parser)
    parser.add_argument("--adjacency", type=Path, help="normalized adjacency CSV; identity when omitted")
    parser.add_argument("--model-kinds", nargs="+", choices=[k.value for k in ModelKind], help="models to compare")
    parser.add_argument("--n-seeds", type=int, help="runs per grid cell, seeded from --seed upwards")
    parser.add_argument("--jobs", type=int, help="runs evaluated in parallel (-1: all cores)")
    parser.add_argument("--epochs", type=int, help="overrides train.max_epochs")


def write_experiment(result, out: Path, manifest) -> None:
    """reports.csv has one row per run, summary.csv one per grid cell."""
    result.reports_frame().to_csv(out / "reports.csv", index=False)
    result.summary.to_csv(out / "summary.csv", index=False)
    manifest.add_artifact(out / "reports.csv")
    manifest.add_artifact(out / "summary.csv")

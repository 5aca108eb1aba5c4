"""Node x hour demand panel: observed (clipped) demand, true demand, censor flags and thresholds."""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from utils.data_ingest import EPOCH, iso_times, to_epoch_seconds
from utils.errors import ValidationError

PANEL_COLUMNS = ["cluster", "hour", "observed_kwh", "true_kwh", "censored", "threshold"]
SECONDS_PER_HOUR = 3600


@dataclass(frozen=True)
class HourRange:
    start: int  # epoch seconds, on an hour boundary
    n_hours: int

    @property
    def end(self) -> int:
        return self.start + self.n_hours * SECONDS_PER_HOUR

    @classmethod
    def covering(cls, first: int, last: int) -> "HourRange":
        """Smallest hour-aligned range containing [first, last]."""
        start = first - first % SECONDS_PER_HOUR
        end = -(-last // SECONDS_PER_HOUR) * SECONDS_PER_HOUR
        return cls(start, max(1, (end - start) // SECONDS_PER_HOUR))


@dataclass(frozen=True)
class DemandPanel:
    node_ids: tuple[str, ...]
    start: int
    observed: np.ndarray   # (nodes, hours) kWh
    true: np.ndarray       # (nodes, hours) kWh, observed + lost
    censored: np.ndarray   # (nodes, hours) bool
    threshold: np.ndarray  # (nodes, hours) clip point where censored, NaN elsewhere

    def __post_init__(self):
        shape = (len(self.node_ids), self.observed.shape[-1] if self.observed.ndim == 2 else -1)
        for name in ("observed", "true", "censored", "threshold"):
            if getattr(self, name).shape != shape:
                raise ValidationError(f"panel {name} has shape {getattr(self, name).shape}, expected {shape}")

    @classmethod
    def from_demand(cls, node_ids, start: int, observed: np.ndarray, true: np.ndarray) -> "DemandPanel":
        """Flags and thresholds follow from the clipping: censored where true exceeds observed."""
        observed = np.asarray(observed, dtype=np.float64)
        true = np.asarray(true, dtype=np.float64)
        censored = true > observed
        threshold = np.where(censored, observed, np.nan)
        return cls(tuple(str(n) for n in node_ids), start, observed, true, censored, threshold)

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def n_hours(self) -> int:
        return self.observed.shape[1]

    @property
    def hours(self) -> HourRange:
        return HourRange(self.start, self.n_hours)

    def hour_index(self) -> pd.DatetimeIndex:
        return pd.date_range(EPOCH + pd.Timedelta(seconds=self.start), periods=self.n_hours, freq="h")

    def lost(self) -> np.ndarray:
        return self.true - self.observed

    def to_frame(self, node_label: str = "cluster") -> pd.DataFrame:
        hours = iso_times(self.start + h * SECONDS_PER_HOUR for h in range(self.n_hours))
        return pd.DataFrame(
            {
                node_label: np.repeat(self.node_ids, self.n_hours),
                "hour": np.tile(hours, self.n_nodes),
                "observed_kwh": self.observed.reshape(-1),
                "true_kwh": self.true.reshape(-1),
                "censored": self.censored.reshape(-1).astype(int),
                "threshold": self.threshold.reshape(-1),
            }
        )

    def write_csv(self, path: str | Path, node_label: str = "cluster") -> None:
        self.to_frame(node_label).to_csv(path, index=False)

    @classmethod
    def read_csv(cls, path: str | Path) -> "DemandPanel":
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"panel file not found: {path}")
        try:
            node_label = pd.read_csv(path, nrows=0).columns[0]
            frame = pd.read_csv(path, dtype={node_label: str}, float_precision="round_trip")
        except pd.errors.EmptyDataError as e:
            raise ValidationError(f"{path}: empty panel file") from e
        expected = [node_label] + PANEL_COLUMNS[1:]
        if list(frame.columns) != expected:
            raise ValidationError(f"{path}:1: expected header {','.join(expected)}")
        if frame.empty:
            raise ValidationError(f"{path}: panel has no rows")

        seconds = to_epoch_seconds(frame["hour"])
        if seconds.isna().any():
            raise ValidationError(f"{path}: unparseable hour values")
        frame["seconds"] = seconds.astype("int64")

        node_ids = tuple(dict.fromkeys(frame[node_label]))
        start = int(frame["seconds"].min())
        n_hours = (int(frame["seconds"].max()) - start) // SECONDS_PER_HOUR + 1
        if len(frame) != len(node_ids) * n_hours:
            raise ValidationError(f"{path}: panel is not a complete node x hour grid")

        rows = frame[node_label].map({n: i for i, n in enumerate(node_ids)}).to_numpy()
        cols = ((frame["seconds"] - start) // SECONDS_PER_HOUR).to_numpy()
        grids = {}
        for name in ("observed_kwh", "true_kwh", "censored", "threshold"):
            grid = np.full((len(node_ids), n_hours), np.nan)
            grid[rows, cols] = frame[name].to_numpy(dtype=np.float64)
            grids[name] = grid
        return cls(
            node_ids,
            start,
            grids["observed_kwh"],
            grids["true_kwh"],
            grids["censored"].astype(bool),
            grids["threshold"],
        )

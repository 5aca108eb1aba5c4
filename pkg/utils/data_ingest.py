"""Trips, stations and the simulated EV fleet: file loading and synthetic generation."""

import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from utils.errors import ValidationError
from utils.spatial_graph import haversine

TRIP_COLUMNS = [
    "vehicle_id", "start_time", "end_time",
    "start_lat", "start_lon", "end_lat", "end_lon", "distance_km",
]
STATION_COLUMNS = ["station_id", "lat", "lon", "power_kw", "plugs"]

EPOCH = pd.Timestamp("1970-01-01", tz="UTC")
SECONDS_PER_DAY = 86400

INITIAL_SOC_MEAN = 0.6
INITIAL_SOC_STD = 0.2
INITIAL_SOC_BOUNDS = (0.20, 1.0)


@dataclass(frozen=True)
class Trip:
    vehicle_id: str
    start_time: int  # epoch seconds, UTC
    end_time: int
    start_lat: float
    start_lon: float
    end_lat: float
    end_lon: float
    distance_km: float

    @property
    def duration_s(self) -> int:
        return self.end_time - self.start_time


@dataclass(frozen=True)
class Station:
    station_id: str
    lat: float
    lon: float
    power_kw: float
    plugs: int


@dataclass(frozen=True)
class EVModelSpec:
    name: str
    market_count: int
    range_km: float
    capacity_kwh: float

    def __post_init__(self):
        if self.market_count < 0:
            raise ValidationError(f"{self.name}: market_count must be >= 0")
        if self.range_km <= 0:
            raise ValidationError(f"{self.name}: range_km must be > 0")
        if self.capacity_kwh <= 0:
            raise ValidationError(f"{self.name}: capacity_kwh must be > 0")


@dataclass
class EVehicle:
    vehicle_id: str
    spec: EVModelSpec
    soc: float


# Danish EV registrations: ten most popular models plus the remainder.
DEFAULT_MARKET = (
    EVModelSpec("Tesla Model 3 SR", 8183, 380.0, 57.0),
    EVModelSpec("Renault Zoe", 4050, 315.0, 52.0),
    EVModelSpec("Tesla Model S", 3915, 560.0, 95.0),
    EVModelSpec("Volkswagen ID.3 EV", 3353, 350.0, 58.0),
    EVModelSpec("Nissan Leaf", 3033, 225.0, 37.0),
    EVModelSpec("Hyundai Kona BEV", 2948, 395.0, 64.0),
    EVModelSpec("Volkswagen ID.4 EV", 2473, 400.0, 77.0),
    EVModelSpec("Kia Niro EV", 1890, 370.0, 64.0),
    EVModelSpec("BMW i3", 1642, 235.0, 37.9),
    EVModelSpec("Volkswagen e-Up!", 1370, 205.0, 32.3),
    EVModelSpec("Others", 17399, 313.0, 60.0),
)


@dataclass(frozen=True)
class SynthConfig:
    """
    Parameters of the synthetic commuter generator. Defaults describe a mid-size
    city fleet; none are fitted to recorded trips.
    """
    n_vehicles: int = 100
    n_days: int = 7
    bbox: tuple[float, float, float, float] = (55.60, 55.75, 12.45, 12.65)  # lat_min, lat_max, lon_min, lon_max
    seed: int | None = None
    start_date: str = "2019-09-02"
    morning_peak_hour: float = 7.5
    evening_peak_hour: float = 16.5
    peak_spread_hours: float = 0.75
    errand_rate_per_day: float = 0.5
    speed_kmh: float = 30.0
    detour_factor: float = 1.3
    n_stations: int = 40
    station_powers_kw: tuple[float, ...] = (7.0, 22.0, 50.0)
    max_plugs: int = 2

    def __post_init__(self):
        if self.n_vehicles < 0:
            raise ValidationError("n_vehicles must be >= 0")
        if self.n_days < 1:
            raise ValidationError("n_days must be >= 1")
        lat_min, lat_max, lon_min, lon_max = self.bbox
        if not (-90 <= lat_min < lat_max <= 90 and -180 <= lon_min < lon_max <= 180):
            raise ValidationError(f"invalid bbox {self.bbox}")
        if self.speed_kmh <= 0:
            raise ValidationError("speed_kmh must be > 0")


def to_epoch_seconds(values: pd.Series) -> pd.Series:
    """Parse ISO-8601 strings to integer UTC seconds; unparseable values become NaN."""
    stamps = pd.to_datetime(values, utc=True, format="ISO8601", errors="coerce")
    return (stamps - EPOCH) // pd.Timedelta(seconds=1)


def iso_times(seconds: Iterable[int]) -> list[str]:
    stamps = pd.to_datetime(pd.Series(list(seconds), dtype="int64"), unit="s", utc=True)
    return stamps.dt.strftime("%Y-%m-%dT%H:%M:%SZ").tolist()


def _read_csv(path: str | Path, columns: list[str]) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"file not found: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError as e:
        raise ValidationError(f"{path}: missing header {','.join(columns)}") from e
    except pd.errors.ParserError as e:
        raise ValidationError(f"{path}: {e}") from e

    if list(frame.columns) != columns:
        raise ValidationError(
            f"{path}:1: expected header {','.join(columns)}, got {','.join(frame.columns)}"
        )
    return frame


def _first_bad_line(mask: pd.Series) -> int:
    """1-based file line of the first flagged data row (line 1 is the header)."""
    return int(np.flatnonzero(mask.to_numpy())[0]) + 2


def _trip_problem(trip: Trip) -> str | None:
    if trip.end_time < trip.start_time:
        return "end_time before start_time"
    if trip.distance_km < 0:
        return f"negative distance_km {trip.distance_km}"
    for lat in (trip.start_lat, trip.end_lat):
        if not -90 <= lat <= 90:
            return f"latitude {lat} out of range"
    for lon in (trip.start_lon, trip.end_lon):
        if not -180 <= lon <= 180:
            return f"longitude {lon} out of range"
    return None


def check_non_overlapping(trips: Sequence[Trip]) -> None:
    """Raise if any vehicle has a trip starting before its previous trip ended."""
    last_end: dict[str, tuple[int, int]] = {}
    for trip in sorted(trips, key=lambda t: (t.vehicle_id, t.start_time, t.end_time)):
        previous = last_end.get(trip.vehicle_id)
        if previous is not None and trip.start_time < previous[1]:
            raise ValidationError(
                f"vehicle {trip.vehicle_id}: trip starting at {trip.start_time} overlaps "
                f"trip {previous[0]}-{previous[1]}"
            )
        last_end[trip.vehicle_id] = (trip.start_time, trip.end_time)


def load_trips(path: str | Path) -> list[Trip]:
    """Read a trips CSV; returns trips sorted by start time (ties by vehicle id)."""
    frame = _read_csv(path, TRIP_COLUMNS)

    start = to_epoch_seconds(frame["start_time"])
    end = to_epoch_seconds(frame["end_time"])
    numeric = frame[TRIP_COLUMNS[3:]].apply(pd.to_numeric, errors="coerce")
    malformed = (
        (frame["vehicle_id"].str.strip() == "")
        | start.isna()
        | end.isna()
        | numeric.isna().any(axis=1)
    )
    if malformed.any():
        raise ValidationError(f"{path}:{_first_bad_line(malformed)}: malformed trip row")

    trips = []
    for i, (vid, t0, t1, row) in enumerate(
        zip(frame["vehicle_id"], start.astype("int64"), end.astype("int64"), numeric.itertuples(index=False))
    ):
        trip = Trip(vid.strip(), int(t0), int(t1), *map(float, row))
        problem = _trip_problem(trip)
        if problem:
            raise ValidationError(f"{path}:{i + 2}: {problem}")
        trips.append(trip)

    trips.sort(key=lambda t: (t.start_time, t.vehicle_id))
    check_non_overlapping(trips)
    logging.info("Loaded %s trips for %s vehicles from %s", len(trips), len({t.vehicle_id for t in trips}), path)
    return trips


def write_trips(trips: Sequence[Trip], path: str | Path) -> None:
    frame = pd.DataFrame(
        {
            "vehicle_id": [t.vehicle_id for t in trips],
            "start_time": iso_times(t.start_time for t in trips),
            "end_time": iso_times(t.end_time for t in trips),
            "start_lat": [t.start_lat for t in trips],
            "start_lon": [t.start_lon for t in trips],
            "end_lat": [t.end_lat for t in trips],
            "end_lon": [t.end_lon for t in trips],
            "distance_km": [t.distance_km for t in trips],
        },
        columns=TRIP_COLUMNS,
    )
    frame.to_csv(path, index=False)


def load_stations(path: str | Path) -> list[Station]:
    frame = _read_csv(path, STATION_COLUMNS)

    numeric = frame[STATION_COLUMNS[1:]].apply(pd.to_numeric, errors="coerce")
    malformed = (frame["station_id"].str.strip() == "") | numeric.isna().any(axis=1)
    if malformed.any():
        raise ValidationError(f"{path}:{_first_bad_line(malformed)}: malformed station row")

    stations = []
    seen: dict[str, int] = {}
    for i, (sid, (lat, lon, power, plugs)) in enumerate(
        zip(frame["station_id"].str.strip(), numeric.itertuples(index=False))
    ):
        line = i + 2
        if sid in seen:
            raise ValidationError(f"{path}:{line}: duplicate station_id {sid} (first on line {seen[sid]})")
        seen[sid] = line
        if power <= 0:
            raise ValidationError(f"{path}:{line}: power_kw must be > 0, got {power}")
        if plugs < 1 or plugs != int(plugs):
            raise ValidationError(f"{path}:{line}: plugs must be an integer >= 1, got {plugs}")
        if not (-90 <= lat <= 90 and -180 <= lon <= 180):
            raise ValidationError(f"{path}:{line}: coordinates ({lat}, {lon}) out of range")
        stations.append(Station(sid, float(lat), float(lon), float(power), int(plugs)))

    logging.info("Loaded %s stations from %s", len(stations), path)
    return stations


def write_stations(stations: Sequence[Station], path: str | Path) -> None:
    pd.DataFrame(
        [(s.station_id, s.lat, s.lon, s.power_kw, s.plugs) for s in stations],
        columns=STATION_COLUMNS,
    ).to_csv(path, index=False)


def _random_point(rng: np.random.Generator, bbox) -> tuple[float, float]:
    lat_min, lat_max, lon_min, lon_max = bbox
    return float(rng.uniform(lat_min, lat_max)), float(rng.uniform(lon_min, lon_max))


def _day_of_week(epoch_seconds: int) -> int:
    """Monday = 0. The epoch fell on a Thursday."""
    return (epoch_seconds // SECONDS_PER_DAY + 3) % 7


def generate_synthetic_trips(config: SynthConfig, seed: int) -> list[Trip]:
    """
    Home-work commutes on weekdays plus Poisson errands, one chain per vehicle.

    Every trip of a day ends before midnight, so per-vehicle trips never overlap.
    """
    rng = np.random.default_rng(seed)
    day0 = int((pd.Timestamp(config.start_date, tz="UTC") - EPOCH) // pd.Timedelta(seconds=1))
    trips: list[Trip] = []

    def leg(vid, depart_h, origin, dest, day_start):
        distance = max(0.5, float(haversine(*origin, *dest)) * config.detour_factor)
        start = day_start + int(round(depart_h * 3600))
        end = start + max(60, int(round(distance / config.speed_kmh * 3600)))
        return Trip(vid, start, end, origin[0], origin[1], dest[0], dest[1], round(distance, 3))

    for v in range(config.n_vehicles):
        vid = f"v{v:05d}"
        home = _random_point(rng, config.bbox)
        work = _random_point(rng, config.bbox)

        for d in range(config.n_days):
            day_start = day0 + d * SECONDS_PER_DAY
            day_end = day_start + SECONDS_PER_DAY
            free_h = 0.0

            if _day_of_week(day_start) < 5:
                out_h = float(np.clip(rng.normal(config.morning_peak_hour, config.peak_spread_hours), 5.0, 11.0))
                outbound = leg(vid, out_h, home, work, day_start)
                back_h = float(np.clip(rng.normal(config.evening_peak_hour, config.peak_spread_hours), 14.0, 20.0))
                back_h = max(back_h, (outbound.end_time - day_start) / 3600 + 1.0)
                inbound = leg(vid, back_h, work, home, day_start)
                trips.extend([outbound, inbound])
                free_h = (inbound.end_time - day_start) / 3600
                errand_window = (max(free_h + 0.5, 17.0), 21.0)
            else:
                errand_window = (9.0, 20.0)

            n_errands = int(rng.poisson(config.errand_rate_per_day))
            next_h = errand_window[0]
            for _ in range(n_errands):
                if next_h >= errand_window[1]:
                    break
                spot = _random_point(rng, config.bbox)
                depart_h = float(rng.uniform(next_h, errand_window[1]))
                there = leg(vid, depart_h, home, spot, day_start)
                dwell_h = float(rng.uniform(0.25, 1.5))
                back = leg(vid, (there.end_time - day_start) / 3600 + dwell_h, spot, home, day_start)
                if back.end_time >= day_end:
                    break
                trips.extend([there, back])
                next_h = (back.end_time - day_start) / 3600 + float(rng.uniform(0.25, 1.0))

    trips.sort(key=lambda t: (t.start_time, t.vehicle_id))
    logging.info("Generated %s synthetic trips for %s vehicles over %s days", len(trips), config.n_vehicles, config.n_days)
    return trips


def generate_synthetic_stations(config: SynthConfig, seed: int) -> list[Station]:
    rng = np.random.default_rng(seed)
    stations = []
    for i in range(config.n_stations):
        lat, lon = _random_point(rng, config.bbox)
        power = float(rng.choice(config.station_powers_kw))
        plugs = int(rng.integers(1, config.max_plugs + 1))
        stations.append(Station(f"s{i:03d}", lat, lon, power, plugs))
    return stations


def truncated_normal(
    rng: np.random.Generator, n: int, mean: float, std: float, low: float, high: float
) -> np.ndarray:
    """Normal(mean, std) restricted to [low, high]."""
    a, b = (low - mean) / std, (high - mean) / std
    return stats.truncnorm.rvs(a, b, loc=mean, scale=std, size=n, random_state=rng)


def sample_fleet(
    vehicle_ids: Iterable[str],
    market: Sequence[EVModelSpec] = DEFAULT_MARKET,
    seed: int = 0,
) -> dict[str, EVehicle]:
    """Assign each vehicle a model by market share and an initial SoC."""
    if not market:
        raise ValidationError("market must contain at least one EV model")
    counts = np.array([m.market_count for m in market], dtype=np.float64)
    if counts.sum() <= 0:
        raise ValidationError("at least one EV model needs a positive market_count")

    ids = sorted(set(vehicle_ids))
    rng = np.random.default_rng(seed)
    models = rng.choice(len(market), size=len(ids), p=counts / counts.sum())
    socs = truncated_normal(rng, len(ids), INITIAL_SOC_MEAN, INITIAL_SOC_STD, *INITIAL_SOC_BOUNDS)
    return {vid: EVehicle(vid, market[m], float(s)) for vid, m, s in zip(ids, models, socs)}


def penetration_subset(
    trips: Sequence[Trip],
    penetration: float,
    data_penetration: float = 0.05,
    seed: int = 0,
) -> list[Trip]:
    """
    Keep the trips of a vehicle sample matching a target EV penetration rate.

    The vehicles come from one seeded permutation, so lower rates select a
    subset of the vehicles chosen at higher rates.
    """
    if not 0 < penetration <= data_penetration:
        raise ValidationError(
            f"penetration must be in (0, {data_penetration}], got {penetration}"
        )
    vehicles = sorted({t.vehicle_id for t in trips})
    order = np.random.default_rng(seed).permutation(len(vehicles))
    n_keep = int(round(len(vehicles) * penetration / data_penetration))
    keep = {vehicles[i] for i in order[:n_keep]}
    return [t for t in trips if t.vehicle_id in keep]


def trips_by_vehicle(trips: Sequence[Trip]) -> dict[str, list[Trip]]:
    grouped: dict[str, list[Trip]] = defaultdict(list)
    for trip in trips:
        grouped[trip.vehicle_id].append(trip)
    for chain in grouped.values():
        chain.sort(key=lambda t: t.start_time)
    return dict(grouped)

import numpy as np
import pytest
from scipy import stats

from utils.data_ingest import (
    DEFAULT_MARKET,
    SECONDS_PER_DAY,
    EVModelSpec,
    SynthConfig,
    generate_synthetic_stations,
    generate_synthetic_trips,
    load_stations,
    load_trips,
    penetration_subset,
    sample_fleet,
    trips_by_vehicle,
    truncated_normal,
    write_stations,
    write_trips,
)
from utils.errors import ValidationError

TRIP_HEADER = "vehicle_id,start_time,end_time,start_lat,start_lon,end_lat,end_lon,distance_km\n"
STATION_HEADER = "station_id,lat,lon,power_kw,plugs\n"


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_header_only_trip_file(tmp_path):
    assert load_trips(write(tmp_path, "trips.csv", TRIP_HEADER)) == []


def test_trips_come_back_sorted(tmp_path):
    path = write(
        tmp_path,
        "trips.csv",
        TRIP_HEADER
        + "b,2019-09-02T10:00:00Z,2019-09-02T10:30:00Z,55.6,12.5,55.7,12.6,9.0\n"
        + "a,2019-09-02T08:00:00Z,2019-09-02T08:20:00Z,55.7,12.6,55.6,12.5,8.5\n",
    )
    trips = load_trips(path)
    assert [t.vehicle_id for t in trips] == ["a", "b"]
    assert trips[0].start_time < trips[1].start_time
    assert trips[0].duration_s == 20 * 60


def test_negative_distance_names_the_line(tmp_path):
    path = write(
        tmp_path,
        "trips.csv",
        TRIP_HEADER
        + "a,2019-09-02T08:00:00Z,2019-09-02T08:20:00Z,55.7,12.6,55.6,12.5,8.5\n"
        + "a,2019-09-02T09:00:00Z,2019-09-02T09:20:00Z,55.7,12.6,55.6,12.5,-1\n",
    )
    with pytest.raises(ValidationError, match=r"trips.csv:3"):
        load_trips(path)


def test_malformed_trip_row(tmp_path):
    path = write(tmp_path, "trips.csv", TRIP_HEADER + "a,yesterday,2019-09-02T08:20:00Z,55.7,12.6,55.6,12.5,8.5\n")
    with pytest.raises(ValidationError, match=r"trips.csv:2"):
        load_trips(path)


def test_overlapping_trips_of_one_vehicle(tmp_path):
    path = write(
        tmp_path,
        "trips.csv",
        TRIP_HEADER
        + "a,2019-09-02T08:00:00Z,2019-09-02T09:00:00Z,55.7,12.6,55.6,12.5,8.5\n"
        + "a,2019-09-02T08:30:00Z,2019-09-02T09:20:00Z,55.6,12.5,55.7,12.6,8.5\n",
    )
    with pytest.raises(ValidationError, match="overlaps"):
        load_trips(path)


def test_one_station(tmp_path):
    (station,) = load_stations(write(tmp_path, "stations.csv", STATION_HEADER + "s1,55.67,12.57,22,2\n"))
    assert station.station_id == "s1"
    assert station.power_kw == 22.0
    assert station.plugs == 2


@pytest.mark.parametrize(
    "rows",
    [
        "s1,55.67,12.57,22,2\ns1,55.68,12.58,7,1\n",
        "s1,55.67,12.57,0,2\n",
        "s1,55.67,12.57,22,0\n",
    ],
)
def test_invalid_stations(tmp_path, rows):
    with pytest.raises(ValidationError):
        load_stations(write(tmp_path, "stations.csv", STATION_HEADER + rows))


def test_wrong_header(tmp_path):
    with pytest.raises(ValidationError, match=":1:"):
        load_stations(write(tmp_path, "stations.csv", "id,lat,lon\ns1,55.6,12.5\n"))


def test_missing_file(tmp_path):
    with pytest.raises(ValidationError):
        load_trips(tmp_path / "missing.csv")


def test_synthetic_trips_are_deterministic(tmp_path):
    config = SynthConfig(n_vehicles=20, n_days=7)
    write_trips(generate_synthetic_trips(config, seed=5), tmp_path / "a.csv")
    write_trips(generate_synthetic_trips(config, seed=5), tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_written_trips_load_back(tmp_path):
    trips = generate_synthetic_trips(SynthConfig(n_vehicles=5, n_days=3), seed=1)
    write_trips(trips, tmp_path / "trips.csv")
    again = load_trips(tmp_path / "trips.csv")
    assert [(t.vehicle_id, t.start_time, t.end_time) for t in again] == [
        (t.vehicle_id, t.start_time, t.end_time) for t in trips
    ]


def test_single_day_stays_within_the_day():
    config = SynthConfig(n_vehicles=1, n_days=1, errand_rate_per_day=3.0)
    trips = generate_synthetic_trips(config, seed=0)
    assert trips
    days = {t.start_time // SECONDS_PER_DAY for t in trips} | {(t.end_time - 1) // SECONDS_PER_DAY for t in trips}
    assert len(days) == 1


def test_no_vehicles_gives_no_trips():
    assert generate_synthetic_trips(SynthConfig(n_vehicles=0), seed=0) == []


def test_synthetic_chains_do_not_overlap():
    trips = generate_synthetic_trips(SynthConfig(n_vehicles=30, n_days=7, errand_rate_per_day=2.0), seed=4)
    for chain in trips_by_vehicle(trips).values():
        assert all(a.end_time <= b.start_time for a, b in zip(chain, chain[1:]))


@pytest.mark.slow
def test_trip_starts_peak_at_commute_hours():
    trips = generate_synthetic_trips(SynthConfig(n_vehicles=1000, n_days=30), seed=0)
    hours = np.array([(t.start_time % SECONDS_PER_DAY) // 3600 for t in trips])
    histogram = np.bincount(hours, minlength=24)
    off_peak = histogram[[0, 1, 2, 3, 4, 12, 13, 22, 23]].mean()
    assert histogram.max() >= 2 * max(off_peak, 1)


def test_synthetic_stations():
    config = SynthConfig(n_stations=25, max_plugs=3)
    stations = generate_synthetic_stations(config, seed=2)
    assert len(stations) == 25
    assert len({s.station_id for s in stations}) == 25
    assert all(1 <= s.plugs <= 3 and s.power_kw in config.station_powers_kw for s in stations)
    lat_min, lat_max, lon_min, lon_max = config.bbox
    assert all(lat_min <= s.lat <= lat_max and lon_min <= s.lon <= lon_max for s in stations)


def test_written_stations_load_back(tmp_path):
    stations = generate_synthetic_stations(SynthConfig(n_stations=5), seed=0)
    write_stations(stations, tmp_path / "stations.csv")
    again = load_stations(tmp_path / "stations.csv")
    assert [(s.station_id, s.power_kw, s.plugs) for s in again] == [(s.station_id, s.power_kw, s.plugs) for s in stations]
    assert np.allclose([(s.lat, s.lon) for s in again], [(s.lat, s.lon) for s in stations], rtol=1e-15)


def test_single_model_market():
    spec = EVModelSpec("Only", 10, 300.0, 50.0)
    fleet = sample_fleet(["a", "b", "c"], [spec], seed=0)
    assert all(v.spec == spec for v in fleet.values())


def test_market_without_counts():
    with pytest.raises(ValidationError):
        sample_fleet(["a"], [EVModelSpec("Nobody", 0, 300.0, 50.0)], seed=0)


def test_market_shares_follow_counts():
    fleet = sample_fleet([f"v{i}" for i in range(50_000)], seed=0)
    share = np.mean([v.spec.name == "Tesla Model 3 SR" for v in fleet.values()])
    total = sum(m.market_count for m in DEFAULT_MARKET)
    assert share == pytest.approx(8183 / total, abs=0.01)


def test_initial_soc_distribution():
    fleet = sample_fleet([f"v{i}" for i in range(100_000)], seed=1)
    socs = np.array([v.soc for v in fleet.values()])
    assert socs.min() >= 0.20 and socs.max() <= 1.0
    expected = stats.truncnorm.mean((0.2 - 0.6) / 0.2, (1.0 - 0.6) / 0.2, loc=0.6, scale=0.2)
    assert socs.mean() == pytest.approx(expected, abs=0.005)


def test_truncated_normal_draws_from_scipy():
    draws = truncated_normal(np.random.default_rng(4), 500, 0.6, 0.2, 0.2, 1.0)
    expected = stats.truncnorm.rvs(-2.0, 2.0, loc=0.6, scale=0.2, size=500, random_state=np.random.default_rng(4))
    assert np.allclose(draws, expected, rtol=0, atol=1e-12)
    assert draws.min() >= 0.2 and draws.max() <= 1.0
    # a window far in the tail still returns at once
    tail = truncated_normal(np.random.default_rng(0), 10, 0.0, 0.1, 0.5, 0.6)
    assert tail.shape == (10,)
    assert np.all((tail >= 0.5) & (tail <= 0.6))


def test_penetration_subsets_are_nested():
    trips = generate_synthetic_trips(SynthConfig(n_vehicles=100, n_days=2), seed=0)
    vehicles = [{t.vehicle_id for t in penetration_subset(trips, p, 0.05, seed=3)} for p in (0.01, 0.03, 0.05)]
    assert [len(v) for v in vehicles] == [20, 60, 100]
    assert vehicles[0] <= vehicles[1] <= vehicles[2]


def test_penetration_above_data_penetration():
    with pytest.raises(ValidationError):
        penetration_subset([], 0.1, 0.05)

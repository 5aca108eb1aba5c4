"""Battery and charging behaviour of a single EV: consumption, willingness, station choice, charging curve."""

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy import special

from utils.data_ingest import Station
from utils.errors import DomainError
from utils.spatial_graph import haversine

TARGET_SOC = 0.8
N_CANDIDATE_STATIONS = 5


@dataclass(frozen=True)
class WillingnessParams:
    """Shapes of the beta distribution behind the willingness to charge."""
    a: float = 4.0
    b: float = 2.0

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0:
            raise DomainError(f"beta shapes must be > 0, got a={self.a}, b={self.b}")


@dataclass(frozen=True)
class ChargeEvent:
    vehicle_id: str
    station_id: str
    arrival_time: int
    depart_time: int
    soc_before: float
    soc_after: float
    energy_kwh: float
    served: bool
    plug_in_time: int | None = None  # service start; differs from arrival when the car waited

    @property
    def connected_from(self) -> int:
        return self.arrival_time if self.plug_in_time is None else self.plug_in_time


class SocUpdate(NamedTuple):
    soc: float
    depleted: bool


def trip_consumption(distance_km: float, range_km: float) -> float:
    """SoC fraction used by a trip, linear in distance. May exceed the remaining SoC."""
    if range_km <= 0:
        raise DomainError(f"range_km must be > 0, got {range_km}")
    if distance_km < 0:
        raise DomainError(f"distance_km must be >= 0, got {distance_km}")
    return distance_km / range_km


def update_soc(soc: float, consumption: float) -> SocUpdate:
    new_soc = max(0.0, soc - consumption)
    return SocUpdate(new_soc, new_soc == 0.0 and consumption > 0)


def willingness_to_charge(soc_initial: float, soc_final: float, params: WillingnessParams = WillingnessParams()) -> float:
    """
    Probability of charging after a trip that took the battery from soc_initial to soc_final.

    The drop in the beta CDF across the trip, relative to the CDF at the start.
    A zero CDF at the start forces charging.
    """
    if soc_final > soc_initial:
        raise DomainError(f"soc_final {soc_final} exceeds soc_initial {soc_initial}")
    if not 0.0 <= soc_final <= 1.0 or not 0.0 <= soc_initial <= 1.0:
        raise DomainError(f"SoC values must lie in [0, 1], got {soc_initial}, {soc_final}")

    cdf_initial = special.betainc(params.a, params.b, soc_initial)
    if cdf_initial == 0.0:
        return 1.0
    cdf_final = special.betainc(params.a, params.b, soc_final)
    return float(np.clip((cdf_initial - cdf_final) / cdf_initial, 0.0, 1.0))


def station_choice_probabilities(
    end_lat: float,
    end_lon: float,
    lats: np.ndarray,
    lons: np.ndarray,
    sign: float = -1.0,
    n_candidates: int = N_CANDIDATE_STATIONS,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Indices of the nearest stations and their choice probabilities.

    Softmax over sign * distance_km. sign=-1 makes closer stations likelier;
    sign=+1 weights stations by exp(D), favouring far ones.
    """
    if len(lats) == 0:
        raise DomainError("no charging stations to choose from")
    distances = haversine(end_lat, end_lon, np.asarray(lats), np.asarray(lons))
    nearest = np.argsort(distances, kind="stable")[:n_candidates]
    logits = sign * distances[nearest]
    weights = np.exp(logits - logits.max())
    return nearest, weights / weights.sum()


def choose_station(
    end_lat: float,
    end_lon: float,
    stations: Sequence[Station],
    rng: np.random.Generator,
    sign: float = -1.0,
) -> str:
    lats = np.array([s.lat for s in stations])
    lons = np.array([s.lon for s in stations])
    nearest, probs = station_choice_probabilities(end_lat, end_lon, lats, lons, sign)
    return stations[int(nearest[rng.choice(len(nearest), p=probs)])].station_id


def time_to_80(capacity_kwh: float, soc: float, power_kw: float) -> float:
    """T80 in hours: 0.8 * (capacity - soc * capacity) / power."""
    if power_kw <= 0:
        raise DomainError(f"power_kw must be > 0, got {power_kw}")
    if capacity_kwh <= 0:
        raise DomainError(f"capacity_kwh must be > 0, got {capacity_kwh}")
    return 0.8 * (capacity_kwh - soc * capacity_kwh) / power_kw


def charge(soc: float, capacity_kwh: float, power_kw: float, duration_h: float) -> float:
    """
    SoC after charging for duration_h on the piecewise-linear curve.

    Linear at full power below T80, a quarter of the power after it. The two
    branches do not meet at T80 when soc > 0.
    """
    t80 = time_to_80(capacity_kwh, soc, power_kw)
    rate = power_kw / capacity_kwh
    if duration_h < t80:
        new_soc = soc + duration_h * rate
    else:
        new_soc = TARGET_SOC + 0.25 * (duration_h - t80) * rate
    return float(min(1.0, max(0.0, new_soc)))


def energy_to_target(soc: float, capacity_kwh: float, target: float = TARGET_SOC) -> float:
    """kWh needed to reach the target SoC; the demand booked for a frustrated charge."""
    return max(0.0, (target - soc) * capacity_kwh)

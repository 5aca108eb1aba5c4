"""
Counterfactual replay of trips through EV charging stations.

Every trip end is a potential charging arrival. The vehicle's battery is drained
by the trip, it decides whether to charge, picks a station and meets one of three
queue disciplines. Served sessions and frustrated (lost) charges land in a ledger
which is then aggregated into an hourly demand panel.
"""

import copy
import heapq
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import pandas as pd

from utils.data_ingest import SECONDS_PER_DAY, EVehicle, Station, Trip, iso_times
from utils.errors import DomainError, ValidationError
from utils.fleet_sim import (
    N_CANDIDATE_STATIONS,
    ChargeEvent,
    WillingnessParams,
    charge,
    energy_to_target,
    station_choice_probabilities,
    time_to_80,
    trip_consumption,
    update_soc,
    willingness_to_charge,
)
from utils.panel import SECONDS_PER_HOUR, DemandPanel, HourRange
from utils.spatial_graph import ClusterAssignment

LEDGER_COLUMNS = [
    "vehicle_id", "station_id", "arrival", "depart",
    "soc_before", "soc_after", "energy_kwh", "served",
]


class QueuePolicy(str, Enum):
    GAS_STATION = "gas_station"
    THREE_HOUR = "three_hour"
    FIRST_COME = "first_come"

    @classmethod
    def parse(cls, name: "str | QueuePolicy") -> "QueuePolicy":
        """Accepts the enum value or the CamelCase name, e.g. "GasStation" or "FirstComeFirstServe"."""
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("-", "_")
        aliases = {
            "gasstation": cls.GAS_STATION,
            "threehour": cls.THREE_HOUR,
            "firstcomefirstserve": cls.FIRST_COME,
            "first_come_first_serve": cls.FIRST_COME,
        }
        for policy in cls:
            if key == policy.value:
                return policy
        if key in aliases:
            return aliases[key]
        raise ValidationError(f"unknown queue policy {name!r}; expected one of {[p.value for p in cls]}")


@dataclass(frozen=True)
class SimParams:
    willingness_a: float = 4.0
    willingness_b: float = 2.0
    station_choice_sign: float = -1.0
    willingness_override: float | None = None  # fixed probability in place of the beta model
    three_hour_cap_h: float = 3.0
    n_candidates: int = N_CANDIDATE_STATIONS

    def __post_init__(self):
        if self.station_choice_sign not in (-1.0, 1.0):
            raise ValidationError(f"station_choice_sign must be -1 or 1, got {self.station_choice_sign}")
        if self.willingness_override is not None and not 0.0 <= self.willingness_override <= 1.0:
            raise ValidationError(f"willingness_override must be in [0, 1], got {self.willingness_override}")
        if self.three_hour_cap_h <= 0:
            raise ValidationError("three_hour_cap_h must be > 0")
        if self.n_candidates < 1:
            raise ValidationError("n_candidates must be >= 1")
        if self.willingness_a <= 0 or self.willingness_b <= 0:
            raise ValidationError(f"beta shapes must be > 0, got a={self.willingness_a}, b={self.willingness_b}")

    @property
    def willingness(self) -> WillingnessParams:
        return WillingnessParams(self.willingness_a, self.willingness_b)


@dataclass(frozen=True)
class Arrival:
    vehicle_id: str
    station_id: str
    time: int          # trip end, epoch seconds
    depart_time: int   # start of the vehicle's next trip (or the horizon end)
    soc: float
    capacity_kwh: float
    seq: int = 0

    @property
    def parking_hours(self) -> float:
        return (self.depart_time - self.time) / SECONDS_PER_HOUR


@dataclass
class StationState:
    station: Station
    busy_until: list[int | None] = field(default_factory=list)
    waiting: deque[Arrival] = field(default_factory=deque)

    def __post_init__(self):
        if not self.busy_until:
            self.busy_until = [None] * self.station.plugs
        if len(self.busy_until) != self.station.plugs:
            raise DomainError(f"station {self.station.station_id}: {len(self.busy_until)} plug slots for {self.station.plugs} plugs")

    def free_plug(self) -> int | None:
        for plug, until in enumerate(self.busy_until):
            if until is None:
                return plug
        return None

    @property
    def occupancy(self) -> int:
        return sum(until is not None for until in self.busy_until)


class OutcomeStatus(str, Enum):
    SERVED = "served"
    QUEUED = "queued"
    LOST = "lost"


@dataclass(frozen=True)
class QueueOutcome:
    status: OutcomeStatus
    event: ChargeEvent | None = None
    plug: int | None = None


@dataclass
class DemandLedger:
    served: list[ChargeEvent] = field(default_factory=list)
    lost: list[ChargeEvent] = field(default_factory=list)
    depletions: int = 0
    hours: HourRange | None = None

    def events(self) -> list[ChargeEvent]:
        return sorted(self.served + self.lost, key=lambda e: (e.arrival_time, e.vehicle_id, e.station_id))

    def to_frame(self) -> pd.DataFrame:
        events = self.events()
        return pd.DataFrame(
            {
                "vehicle_id": [e.vehicle_id for e in events],
                "station_id": [e.station_id for e in events],
                "arrival": iso_times(e.arrival_time for e in events),
                "depart": iso_times(e.depart_time for e in events),
                "soc_before": [e.soc_before for e in events],
                "soc_after": [e.soc_after for e in events],
                "energy_kwh": [e.energy_kwh for e in events],
                "served": [int(e.served) for e in events],
            },
            columns=LEDGER_COLUMNS,
        )

    def write_csv(self, path: str | Path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.10g")


def _serve(state: StationState, arrival: Arrival, plug: int, now: int, duration_h: float) -> QueueOutcome:
    """Occupy `plug` from `now` for duration_h hours (never past the departure)."""
    end = min(arrival.depart_time, now + int(round(max(0.0, duration_h) * SECONDS_PER_HOUR)))
    plugged_h = (end - now) / SECONDS_PER_HOUR
    power = state.station.power_kw
    # the second branch of the curve can fall below the starting SoC
    soc_after = max(arrival.soc, charge(arrival.soc, arrival.capacity_kwh, power, plugged_h))
    state.busy_until[plug] = end
    event = ChargeEvent(
        vehicle_id=arrival.vehicle_id,
        station_id=arrival.station_id,
        arrival_time=arrival.time,
        depart_time=end,
        soc_before=arrival.soc,
        soc_after=soc_after,
        energy_kwh=(soc_after - arrival.soc) * arrival.capacity_kwh,
        served=True,
        plug_in_time=now,
    )
    return QueueOutcome(OutcomeStatus.SERVED, event, plug)


def lost_event(arrival: Arrival) -> ChargeEvent:
    """A frustrated charge: the energy it would have taken to reach 80% SoC."""
    return ChargeEvent(
        vehicle_id=arrival.vehicle_id,
        station_id=arrival.station_id,
        arrival_time=arrival.time,
        depart_time=arrival.depart_time,
        soc_before=arrival.soc,
        soc_after=arrival.soc,
        energy_kwh=energy_to_target(arrival.soc, arrival.capacity_kwh),
        served=False,
    )


def _gas_station_session_hours(state: StationState, arrival: Arrival, now: int) -> float:
    t80 = time_to_80(arrival.capacity_kwh, arrival.soc, state.station.power_kw)
    # whole seconds, rounded up so the session reaches the 80% branch
    t80 = math.ceil(t80 * SECONDS_PER_HOUR + 1e-6) / SECONDS_PER_HOUR
    return min(t80, (arrival.depart_time - now) / SECONDS_PER_HOUR)


def step_gas_station_queue(state: StationState, arrival: Arrival) -> QueueOutcome:
    """Charge to 80% on a free plug, otherwise join the FIFO line."""
    plug = state.free_plug()
    if plug is None:
        state.waiting.append(arrival)
        return QueueOutcome(OutcomeStatus.QUEUED)
    return _serve(state, arrival, plug, arrival.time, _gas_station_session_hours(state, arrival, arrival.time))


def step_three_hour_queue(state: StationState, arrival: Arrival, cap_hours: float = 3.0) -> QueueOutcome:
    plug = state.free_plug()
    if plug is None:
        return QueueOutcome(OutcomeStatus.LOST, lost_event(arrival))
    return _serve(state, arrival, plug, arrival.time, min(cap_hours, arrival.parking_hours))


def step_first_come_queue(state: StationState, arrival: Arrival) -> QueueOutcome:
    plug = state.free_plug()
    if plug is None:
        return QueueOutcome(OutcomeStatus.LOST, lost_event(arrival))
    return _serve(state, arrival, plug, arrival.time, arrival.parking_hours)


def serve_waiting(state: StationState, now: int) -> list[QueueOutcome]:
    """
    Hand free plugs to the line at time `now`.

    Waiters whose next trip has already started leave unserved. A car that gets
    a plug charges until 80% or until its next trip, whichever comes first.
    """
    outcomes = []
    while state.waiting:
        head = state.waiting[0]
        if head.depart_time <= now:
            state.waiting.popleft()
            outcomes.append(QueueOutcome(OutcomeStatus.LOST, lost_event(head)))
            continue
        plug = state.free_plug()
        if plug is None:
            break
        state.waiting.popleft()
        outcomes.append(_serve(state, head, plug, now, _gas_station_session_hours(state, head, now)))
    return outcomes


def expire_waiter(state: StationState, seq: int) -> QueueOutcome | None:
    """Drop the waiter with this sequence number if it is still in line."""
    for waiter in state.waiting:
        if waiter.seq == seq:
            state.waiting.remove(waiter)
            return QueueOutcome(OutcomeStatus.LOST, lost_event(waiter))
    return None


class _Event(IntEnum):
    # same-instant order: freed plugs first, then expiring waiters, then new arrivals
    PLUG_FREE = 0
    WAIT_EXPIRE = 1
    TRIP_END = 2


def horizon_for(trips: Sequence[Trip]) -> HourRange | None:
    """Midnight before the first trip to the first midnight after the last trip ends."""
    if not trips:
        return None
    first = min(t.start_time for t in trips)
    last = max(t.end_time for t in trips)
    start = first - first % SECONDS_PER_DAY
    end = (last // SECONDS_PER_DAY + 1) * SECONDS_PER_DAY
    return HourRange(start, (end - start) // SECONDS_PER_HOUR)


def run_counterfactual(
    trips: Sequence[Trip],
    fleet: Mapping[str, EVehicle],
    stations: Sequence[Station],
    policy: QueuePolicy | str,
    params: SimParams = SimParams(),
    seed: int = 0,
) -> DemandLedger:
    """
    Replay the trips in time order as if every vehicle were the EV in `fleet`.

    The fleet is copied; callers keep their initial SoC values.
    """
    policy = QueuePolicy.parse(policy)
    missing = sorted({t.vehicle_id for t in trips} - set(fleet))
    if missing:
        raise ValidationError(f"{len(missing)} trip vehicle(s) missing from the fleet, e.g. {missing[0]}")
    if trips and not stations:
        raise ValidationError("no charging stations to simulate")

    fleet = copy.deepcopy(dict(fleet))
    ledger = DemandLedger(hours=horizon_for(trips))
    if not trips:
        return ledger

    rng = np.random.default_rng(seed)
    states = {s.station_id: StationState(s) for s in stations}
    station_ids = [s.station_id for s in stations]
    lats = np.array([s.lat for s in stations])
    lons = np.array([s.lon for s in stations])
    willingness = params.willingness

    steps: dict[QueuePolicy, Callable[[StationState, Arrival], QueueOutcome]] = {
        QueuePolicy.GAS_STATION: step_gas_station_queue,
        QueuePolicy.THREE_HOUR: lambda state, arrival: step_three_hour_queue(state, arrival, params.three_hour_cap_h),
        QueuePolicy.FIRST_COME: step_first_come_queue,
    }
    step = steps[policy]

    heap: list[tuple] = []
    seq = 0

    def push(time: int, kind: _Event, vehicle_id: str, payload) -> None:
        nonlocal seq
        heapq.heappush(heap, (time, int(kind), vehicle_id, seq, payload))
        seq += 1

    horizon_end = ledger.hours.end
    chains: dict[str, list[Trip]] = {}
    for trip in sorted(trips, key=lambda t: (t.vehicle_id, t.start_time)):
        chains.setdefault(trip.vehicle_id, []).append(trip)
    for chain in chains.values():
        for trip, following in zip(chain, chain[1:] + [None]):
            depart = following.start_time if following is not None else horizon_end
            push(trip.end_time, _Event.TRIP_END, trip.vehicle_id, (trip, depart))

    def record(outcome: QueueOutcome) -> None:
        if outcome.status is OutcomeStatus.SERVED:
            ledger.served.append(outcome.event)
            fleet[outcome.event.vehicle_id].soc = outcome.event.soc_after
            push(outcome.event.depart_time, _Event.PLUG_FREE, outcome.event.vehicle_id,
                 (outcome.event.station_id, outcome.plug))
        elif outcome.status is OutcomeStatus.LOST:
            ledger.lost.append(outcome.event)

    while heap:
        now, kind, vehicle_id, event_seq, payload = heapq.heappop(heap)

        if kind == _Event.PLUG_FREE:
            station_id, plug = payload
            state = states[station_id]
            state.busy_until[plug] = None
            for outcome in serve_waiting(state, now):
                record(outcome)

        elif kind == _Event.WAIT_EXPIRE:
            station_id, waiter_seq = payload
            outcome = expire_waiter(states[station_id], waiter_seq)
            if outcome is not None:
                record(outcome)

        else:
            trip, depart = payload
            vehicle = fleet[vehicle_id]
            soc_initial = vehicle.soc
            used = trip_consumption(trip.distance_km, vehicle.spec.range_km)
            soc_final, depleted = update_soc(soc_initial, used)
            vehicle.soc = soc_final
            ledger.depletions += int(depleted)

            if params.willingness_override is not None:
                p_charge = params.willingness_override
            else:
                p_charge = willingness_to_charge(soc_initial, soc_final, willingness)
            # one draw per arrival keeps the random stream aligned across policies
            if rng.random() >= p_charge:
                continue

            nearest, probs = station_choice_probabilities(
                trip.end_lat, trip.end_lon, lats, lons, params.station_choice_sign, params.n_candidates
            )
            station_id = station_ids[int(nearest[rng.choice(len(nearest), p=probs)])]
            arrival = Arrival(
                vehicle_id=vehicle_id,
                station_id=station_id,
                time=now,
                depart_time=depart,
                soc=soc_final,
                capacity_kwh=vehicle.spec.capacity_kwh,
                seq=event_seq,
            )
            outcome = step(states[station_id], arrival)
            if outcome.status is OutcomeStatus.QUEUED:
                push(depart, _Event.WAIT_EXPIRE, vehicle_id, (station_id, event_seq))
            else:
                record(outcome)

    logging.info(
        "Counterfactual %s: %s served, %s lost, %s depleted trips",
        policy.value, len(ledger.served), len(ledger.lost), ledger.depletions,
    )
    return ledger


def _spread(start: int, end: int, energy: float, hours: HourRange) -> list[tuple[int, float]]:
    """Energy per panel hour, proportional to the connected time in each hour."""
    first = (start - hours.start) // SECONDS_PER_HOUR
    if end <= start:
        return [(first, energy)]
    last = (end - 1 - hours.start) // SECONDS_PER_HOUR
    total = end - start
    shares = []
    for h in range(first, last + 1):
        lo = max(start, hours.start + h * SECONDS_PER_HOUR)
        hi = min(end, hours.start + (h + 1) * SECONDS_PER_HOUR)
        shares.append((h, energy * (hi - lo) / total))
    return shares


def _aggregate(
    ledger: DemandLedger,
    node_of: Callable[[str], int],
    node_ids: Sequence[str],
    hours: HourRange,
) -> DemandPanel:
    served = np.zeros((len(node_ids), hours.n_hours))
    lost = np.zeros_like(served)

    for event in ledger.served:
        if event.connected_from < hours.start or event.depart_time > hours.end:
            raise ValidationError(
                f"served event of {event.vehicle_id} at {event.station_id} falls outside the panel hours"
            )
        node = node_of(event.station_id)
        for h, energy in _spread(event.connected_from, event.depart_time, event.energy_kwh, hours):
            served[node, h] += energy

    for event in ledger.lost:
        if not hours.start <= event.arrival_time < hours.end:
            raise ValidationError(
                f"lost event of {event.vehicle_id} at {event.station_id} falls outside the panel hours"
            )
        lost[node_of(event.station_id), (event.arrival_time - hours.start) // SECONDS_PER_HOUR] += event.energy_kwh

    return DemandPanel.from_demand(node_ids, hours.start, served, served + lost)


def aggregate_demand(ledger: DemandLedger, clusters: ClusterAssignment, hours: HourRange | None = None) -> DemandPanel:
    """Cluster x hour panel of served (observed) and served + lost (true) demand."""
    hours = hours or ledger.hours
    if hours is None:
        raise ValidationError("an empty ledger needs an explicit hour range")

    def node_of(station_id: str) -> int:
        try:
            return clusters.station_to_cluster[station_id]
        except KeyError:
            raise ValidationError(f"station {station_id} has no cluster") from None

    return _aggregate(ledger, node_of, [str(c) for c in range(clusters.k)], hours)


def aggregate_station_demand(
    ledger: DemandLedger, station_ids: Sequence[str], hours: HourRange | None = None
) -> DemandPanel:
    """Same apportionment as aggregate_demand, one node per station."""
    hours = hours or ledger.hours
    if hours is None:
        raise ValidationError("an empty ledger needs an explicit hour range")
    index = {sid: i for i, sid in enumerate(station_ids)}

    def node_of(station_id: str) -> int:
        try:
            return index[station_id]
        except KeyError:
            raise ValidationError(f"station {station_id} is not in the station list") from None

    return _aggregate(ledger, node_of, list(station_ids), hours)


@dataclass(frozen=True)
class CensorshipStats:
    per_node: dict[str, float]
    overall: float

    def to_dict(self) -> dict:
        return {"overall": self.overall, "per_node": self.per_node}


def censorship_stats(panel: DemandPanel) -> CensorshipStats:
    """Fraction of censored hours per node and pooled over the panel."""
    per_node = panel.censored.mean(axis=1) if panel.n_hours else np.zeros(panel.n_nodes)
    overall = float(panel.censored.mean()) if panel.censored.size else 0.0
    return CensorshipStats({n: float(f) for n, f in zip(panel.node_ids, per_node)}, overall)


def max_plug_occupancy(ledger: DemandLedger) -> dict[str, int]:
    """Peak number of simultaneously connected cars per station."""
    sweeps: dict[str, list[tuple[int, int]]] = {}
    for event in ledger.served:
        if event.depart_time <= event.connected_from:
            continue
        sweeps.setdefault(event.station_id, []).extend(
            [(event.connected_from, 1), (event.depart_time, -1)]
        )
    peaks = {}
    for station_id, points in sweeps.items():
        # releases sort before connections at the same instant
        current = peak = 0
        for _, delta in sorted(points):
            current += delta
            peak = max(peak, current)
        peaks[station_id] = peak
    return peaks

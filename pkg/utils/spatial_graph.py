"""Station clustering and the normalized adjacency the graph convolution runs on."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np
import pandas as pd

from utils.errors import ValidationError

if TYPE_CHECKING:
    from utils.data_ingest import Station

EARTH_RADIUS_KM = 6371.0


@dataclass(frozen=True)
class ClusterAssignment:
    k: int
    centroids: list[tuple[float, float]]
    station_to_cluster: dict[str, int]
    inertia: float = 0.0
    inertia_history: list[float] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "station_id": list(self.station_to_cluster),
                "cluster": list(self.station_to_cluster.values()),
            }
        )


@dataclass(frozen=True)
class AdjacencyPair:
    A: np.ndarray
    A_hat: np.ndarray


def haversine(lat1, lon1, lat2, lon2):
    """Great-circle distance in km. Accepts scalars or numpy arrays."""
    lat1, lon1, lat2, lon2 = map(np.radians, (lat1, lon1, lat2, lon2))
    a = (
        np.sin((lat2 - lat1) / 2) ** 2
        + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    )
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def _kmeans_plus_plus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centroids = [points[rng.integers(len(points))]]
    for _ in range(1, k):
        d2 = np.min(((points[:, None, :] - np.array(centroids)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        if total > 0:
            idx = rng.choice(len(points), p=d2 / total)
        else:
            # all remaining points coincide with a centroid
            idx = rng.integers(len(points))
        centroids.append(points[idx])
    return np.array(centroids, dtype=np.float64)


def _lloyd(points: np.ndarray, centroids: np.ndarray, max_iters: int):
    labels = None
    history = []
    for _ in range(max(1, max_iters)):
        d2 = ((points[:, None, :] - centroids[None]) ** 2).sum(-1)
        new_labels = d2.argmin(axis=1)
        history.append(float(d2[np.arange(len(points)), new_labels].sum()))
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels

        for c in range(len(centroids)):
            members = points[labels == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
            else:
                # re-seed at the point worst served by its own centroid
                own = d2[np.arange(len(points)), labels]
                far = int(own.argmax())
                centroids[c] = points[far]
                labels[far] = c

    # final centroids are exactly the member means of the final labels
    for c in range(len(centroids)):
        members = points[labels == c]
        if len(members):
            centroids[c] = members.mean(axis=0)
    inertia = float(((points - centroids[labels]) ** 2).sum())
    history.append(inertia)
    return labels, centroids, inertia, history


def kmeans_cluster(
    stations: Sequence["Station"],
    k: int,
    seed: int = 0,
    max_iters: int = 300,
    n_init: int = 10,
) -> ClusterAssignment:
    """
    Lloyd's k-means on raw (lat, lon) degrees with k-means++ seeding.

    The best of `n_init` seeded restarts (lowest inertia) is kept.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if len(stations) < k:
        raise ValidationError(f"cannot form {k} clusters from {len(stations)} stations")

    points = np.array([(s.lat, s.lon) for s in stations], dtype=np.float64)
    rng = np.random.default_rng(seed)

    best = None
    for _ in range(max(1, n_init)):
        init = _kmeans_plus_plus(points, k, rng)
        result = _lloyd(points, init, max_iters)
        if best is None or result[2] < best[2]:
            best = result

    labels, centroids, inertia, history = best
    logging.info("k-means: %s stations into %s clusters, inertia %.6g", len(stations), k, inertia)
    return ClusterAssignment(
        k=k,
        centroids=[(float(lat), float(lon)) for lat, lon in centroids],
        station_to_cluster={s.station_id: int(c) for s, c in zip(stations, labels)},
        inertia=inertia,
        inertia_history=history,
    )


def write_clusters(assignment: ClusterAssignment, path: str | Path) -> None:
    frame = assignment.to_frame()
    lat = {c: assignment.centroids[c][0] for c in range(assignment.k)} if assignment.centroids else {}
    lon = {c: assignment.centroids[c][1] for c in range(assignment.k)} if assignment.centroids else {}
    frame["centroid_lat"] = frame["cluster"].map(lat)
    frame["centroid_lon"] = frame["cluster"].map(lon)
    frame.to_csv(path, index=False, float_format="%.17g")


def read_clusters(path: str | Path) -> ClusterAssignment:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"cluster file not found: {path}")
    frame = pd.read_csv(path, dtype={"station_id": str}, float_precision="round_trip")
    if not {"station_id", "cluster"} <= set(frame.columns):
        raise ValidationError(f"{path}:1: expected columns station_id,cluster")
    k = int(frame["cluster"].max()) + 1 if len(frame) else 0
    centroids = []
    if {"centroid_lat", "centroid_lon"} <= set(frame.columns):
        first = frame.groupby("cluster")[["centroid_lat", "centroid_lon"]].first()
        centroids = [(float(first.loc[c, "centroid_lat"]), float(first.loc[c, "centroid_lon"])) for c in range(k)]
    return ClusterAssignment(
        k=k,
        centroids=centroids,
        station_to_cluster=dict(zip(frame["station_id"], frame["cluster"].astype(int).tolist())),
    )


def build_adjacency(centroids: Sequence[tuple[float, float]], bandwidth: float = 1.0) -> AdjacencyPair:
    """Kernel weights exp(-h/bandwidth) between nodes, then D^-1/2 (A + I) D^-1/2."""
    coords = np.asarray(centroids, dtype=np.float64).reshape(-1, 2)
    lat, lon = coords[:, 0], coords[:, 1]
    dist = haversine(lat[:, None], lon[:, None], lat[None, :], lon[None, :])

    A = np.exp(-dist / bandwidth)
    np.fill_diagonal(A, 0.0)
    A = 0.5 * (A + A.T)

    A_tilde = A + np.eye(len(coords))
    d_inv_sqrt = 1.0 / np.sqrt(A_tilde.sum(axis=1))
    A_hat = d_inv_sqrt[:, None] * A_tilde * d_inv_sqrt[None, :]
    return AdjacencyPair(A=A, A_hat=A_hat)


def write_adjacency(pair: AdjacencyPair, path: str | Path) -> None:
    """Dense CSV of the normalized adjacency, one row per node."""
    pd.DataFrame(pair.A_hat).to_csv(path, header=False, index=False, float_format="%.17g")


def read_adjacency(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"adjacency file not found: {path}")
    A_hat = pd.read_csv(path, header=None, float_precision="round_trip").to_numpy(dtype=np.float64)
    if A_hat.ndim != 2 or A_hat.shape[0] != A_hat.shape[1]:
        raise ValidationError(f"{path}: adjacency must be square, got {A_hat.shape}")
    return A_hat

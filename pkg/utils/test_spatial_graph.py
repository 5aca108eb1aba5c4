import numpy as np
import pytest

from utils.data_ingest import Station
from utils.errors import ValidationError
from utils.spatial_graph import (
    build_adjacency,
    haversine,
    kmeans_cluster,
    read_adjacency,
    read_clusters,
    write_adjacency,
    write_clusters,
)


def stations_at(points):
    return [Station(f"s{i}", lat, lon, 22.0, 2) for i, (lat, lon) in enumerate(points)]


def test_haversine_basics():
    assert haversine(55.0, 12.0, 55.0, 12.0) == 0.0
    # Copenhagen to Aarhus
    assert 156.0 < haversine(55.6761, 12.5683, 56.1629, 10.2039) < 157.5


def test_haversine_is_symmetric():
    rng = np.random.default_rng(1)
    lat1, lat2 = rng.uniform(-80, 80, (2, 50))
    lon1, lon2 = rng.uniform(-179, 179, (2, 50))
    assert np.allclose(haversine(lat1, lon1, lat2, lon2), haversine(lat2, lon2, lat1, lon1))


def test_one_cluster_per_station():
    stations = stations_at([(55.60, 12.50), (55.65, 12.55), (55.70, 12.60)])
    result = kmeans_cluster(stations, 3, seed=0)
    assert sorted(result.station_to_cluster.values()) == [0, 1, 2]
    assert result.inertia == pytest.approx(0.0, abs=1e-20)


def test_separated_blobs_are_recovered():
    rng = np.random.default_rng(3)
    west = rng.normal((55.0, 10.0), 0.01, size=(20, 2))
    east = rng.normal((56.0, 12.0), 0.01, size=(20, 2))
    stations = stations_at(np.vstack([west, east]))
    labels = kmeans_cluster(stations, 2, seed=0).station_to_cluster
    west_labels = {labels[f"s{i}"] for i in range(20)}
    east_labels = {labels[f"s{i}"] for i in range(20, 40)}
    assert len(west_labels) == 1 and len(east_labels) == 1
    assert west_labels != east_labels


def test_kmeans_is_close_to_best_of_many_restarts():
    rng = np.random.default_rng(7)
    stations = stations_at(rng.uniform((55.6, 12.4), (55.8, 12.7), size=(100, 2)))
    inertia = kmeans_cluster(stations, 10, seed=0).inertia
    best = min(kmeans_cluster(stations, 10, seed=s, n_init=1).inertia for s in range(50))
    assert inertia <= 1.05 * best


def test_kmeans_history_does_not_increase():
    rng = np.random.default_rng(11)
    stations = stations_at(rng.uniform((55.6, 12.4), (55.8, 12.7), size=(60, 2)))
    history = kmeans_cluster(stations, 6, seed=2, n_init=1).inertia_history
    assert all(b <= a + 1e-12 for a, b in zip(history, history[1:]))


def test_too_few_stations():
    with pytest.raises(ValidationError):
        kmeans_cluster(stations_at([(55.0, 12.0)]), 2)


def test_single_node_adjacency():
    pair = build_adjacency([(55.0, 12.0)])
    assert pair.A.tolist() == [[0.0]]
    assert pair.A_hat.tolist() == [[1.0]]


def test_coincident_nodes():
    pair = build_adjacency([(55.0, 12.0), (55.0, 12.0)])
    assert np.allclose(pair.A, [[0.0, 1.0], [1.0, 0.0]])
    assert np.allclose(pair.A_hat, 0.5)


def test_adjacency_matches_direct_construction():
    centroids = [(55.60, 12.50), (55.61, 12.52), (55.63, 12.47)]
    pair = build_adjacency(centroids, bandwidth=2.0)

    k = len(centroids)
    A = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            if i != j:
                A[i, j] = np.exp(-haversine(*centroids[i], *centroids[j]) / 2.0)
    A_tilde = A + np.eye(k)
    D = np.diag(A_tilde.sum(axis=1) ** -0.5)
    assert np.allclose(pair.A_hat, D @ A_tilde @ D, atol=1e-12)
    assert np.allclose(pair.A_hat, pair.A_hat.T)


@pytest.mark.parametrize("bandwidth", [0.5, 1.0, 20.0])
def test_normalized_adjacency_has_spectral_radius_at_most_one(bandwidth):
    rng = np.random.default_rng(11)
    for _ in range(50):
        k = int(rng.integers(1, 12))
        centroids = np.column_stack([rng.uniform(55.5, 55.9, k), rng.uniform(12.3, 12.7, k)])
        eigenvalues = np.linalg.eigvalsh(build_adjacency(centroids, bandwidth).A_hat)
        assert np.abs(eigenvalues).max() <= 1.0 + 1e-12


def test_cluster_and_adjacency_files(tmp_path):
    stations = stations_at([(55.60, 12.50), (55.61, 12.51), (55.70, 12.60), (55.71, 12.61)])
    clusters = kmeans_cluster(stations, 2, seed=0)
    pair = build_adjacency(clusters.centroids)

    write_clusters(clusters, tmp_path / "clusters.csv")
    write_adjacency(pair, tmp_path / "adjacency.csv")
    again = read_clusters(tmp_path / "clusters.csv")
    assert again.k == 2
    assert again.station_to_cluster == clusters.station_to_cluster
    assert np.allclose(again.centroids, clusters.centroids)
    assert np.allclose(read_adjacency(tmp_path / "adjacency.csv"), pair.A_hat, rtol=1e-14, atol=0)


def test_missing_adjacency_file(tmp_path):
    with pytest.raises(ValidationError):
        read_adjacency(tmp_path / "nope.csv")

import numpy as np
import pytest

from utils.errors import ValidationError
from utils.panel import DemandPanel, HourRange

START = 1567382400  # 2019-09-02T00:00:00Z


def test_flags_follow_clipping():
    panel = DemandPanel.from_demand(["a", "b"], START, [[1.0, 2.0], [0.0, 3.0]], [[1.0, 5.0], [0.0, 3.0]])
    assert panel.censored.tolist() == [[False, True], [False, False]]
    assert panel.threshold[0, 1] == 2.0
    assert np.isnan(panel.threshold[[0, 1, 1], [0, 0, 1]]).all()
    assert panel.lost().tolist() == [[0.0, 3.0], [0.0, 0.0]]


def test_shapes_are_checked():
    with pytest.raises(ValidationError):
        DemandPanel(("a",), START, np.zeros((1, 3)), np.zeros((1, 2)), np.zeros((1, 3), bool), np.zeros((1, 3)))


def test_hour_range_covering():
    hours = HourRange.covering(START + 90, START + 3 * 3600 + 1)
    assert hours.start == START
    assert hours.n_hours == 4
    assert hours.end == START + 4 * 3600


def test_csv_round_trip(tmp_path, make_panel):
    panel = make_panel(k=2, n_hours=30)
    panel.write_csv(tmp_path / "panel.csv")
    again = DemandPanel.read_csv(tmp_path / "panel.csv")
    assert again.node_ids == panel.node_ids
    assert again.start == panel.start
    assert np.array_equal(again.censored, panel.censored)
    assert np.allclose(again.true, panel.true, rtol=1e-14)
    assert np.allclose(again.threshold, panel.threshold, rtol=1e-14, equal_nan=True)


def test_station_panels_keep_their_label(tmp_path):
    panel = DemandPanel.from_demand(["s001", "s002"], START, np.ones((2, 3)), np.ones((2, 3)))
    panel.write_csv(tmp_path / "stations.csv", node_label="station_id")
    assert (tmp_path / "stations.csv").read_text().startswith("station_id,hour,")
    assert DemandPanel.read_csv(tmp_path / "stations.csv").node_ids == ("s001", "s002")


def test_frame_has_one_row_per_node_hour(make_panel):
    frame = make_panel(k=3, n_hours=5).to_frame()
    assert len(frame) == 15
    assert frame["hour"].iloc[0] == "2019-09-02T00:00:00Z"
    assert set(frame["censored"]) <= {0, 1}


def test_incomplete_grid_is_rejected(tmp_path, make_panel):
    make_panel(k=2, n_hours=4).write_csv(tmp_path / "panel.csv")
    lines = (tmp_path / "panel.csv").read_text().splitlines()
    (tmp_path / "panel.csv").write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(ValidationError, match="complete"):
        DemandPanel.read_csv(tmp_path / "panel.csv")


def test_hour_index_is_hourly(make_panel):
    index = make_panel(k=1, n_hours=48).hour_index()
    assert len(index) == 48
    assert index[0].dayofweek == 0
    assert (index[1] - index[0]).total_seconds() == 3600

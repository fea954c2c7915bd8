import pytest

from mptransit import ScenarioError, SegmentationStrategy, load_scenario, segment_vehicle_window
from mptransit.network import Link
from tests.conftest import scenario_path


def write_scenario(tmp_path, body):
    p = tmp_path / "scenario.yaml"
    p.write_text(body)
    return str(p)


MINIMAL = """
name: minimal
links:
  - {id: N_in,  to: X,   length_m: 200}
  - {id: S_in,  to: X,   length_m: 200}
  - {id: N_out, from: X, length_m: 200}
  - {id: S_out, from: X, length_m: 200}
movements:
  - {in: N_in, out: S_out, sat_flow_vph: 1800, turn_ratio: TR1}
  - {in: S_in, out: N_out, sat_flow_vph: 1800, turn_ratio: 1.0}
  - {in: N_in, out: N_out, sat_flow_vph: 1800, turn_ratio: TR2}
  - {in: S_in, out: S_out, sat_flow_vph: 1800, turn_ratio: 0.0}
nodes:
  - id: X
    phases:
      - [N_in>S_out, S_in>N_out]
      - [N_in>N_out, S_in>S_out]
demand:
  - {entry: N_in, profile_vph: [[0, 300]]}
sim: {horizon_s: 1200, warmup_s: 100}
"""


def test_minimal_scenario_loads(tmp_path):
    path = write_scenario(tmp_path, MINIMAL.replace("TR1", "0.8").replace("TR2", "0.2"))
    sc = load_scenario(path)
    assert len(sc.network.movements) == 4
    assert len(sc.network.nodes["X"].phases) == 2
    # unit conversions: 1800 veh/h -> 0.5 veh/s, default 50 km/h -> 13.9 m/s
    m = sc.network.movements["N_in>S_out"]
    assert m.sat_flow == pytest.approx(0.5)
    assert sc.network.links["N_in"].free_flow_speed == pytest.approx(50 / 3.6)


def test_turning_ratio_over_one_rejected(tmp_path):
    path = write_scenario(tmp_path, MINIMAL.replace("TR1", "1.0").replace("TR2", "0.2"))
    with pytest.raises(ScenarioError, match="turning ratios sum"):
        load_scenario(path)


def test_missing_link_reported(tmp_path):
    body = MINIMAL.replace("TR1", "0.8").replace("TR2", "0.2")
    body = body.replace("- {in: S_in, out: N_out, sat_flow_vph: 1800, turn_ratio: 1.0}",
                        "- {in: S_in, out: GHOST, sat_flow_vph: 1800, turn_ratio: 1.0}")
    with pytest.raises(ScenarioError, match="GHOST"):
        load_scenario(body and write_scenario(tmp_path, body))


def test_station_beyond_link_reported(tmp_path):
    body = MINIMAL.replace("TR1", "0.8").replace("TR2", "0.2")
    body = body.replace("- {id: N_in,  to: X,   length_m: 200}",
                        "- {id: N_in,  to: X,   length_m: 200, stations_m: [250]}")
    with pytest.raises(ScenarioError, match="station"):
        load_scenario(write_scenario(tmp_path, body))


def test_corridor_fixture_shape(corridor_scenario):
    net = corridor_scenario.network
    assert len(net.nodes) == 3
    assert len(corridor_scenario.transit.lines) == 2
    assert not corridor_scenario.network.validate()
    # every movement is a member of at least one phase at its node
    in_phase = set()
    for node in net.nodes.values():
        for phase in node.phases:
            in_phase.update(phase.movements)
    assert in_phase == set(net.movements)


def test_movement_in_exactly_one_from_link_list(corridor_scenario):
    net = corridor_scenario.network
    seen = {}
    for link_id in net.links:
        for m in net.movements_from(link_id):
            assert m.id not in seen
            seen[m.id] = link_id
    assert set(seen) == set(net.movements)


def test_segment_windows():
    link = Link(id="l", length=900.0)
    assert segment_vehicle_window(link, SegmentationStrategy.parse("S0")) == (0.0, 900.0)
    assert segment_vehicle_window(link, SegmentationStrategy.parse("S2")) == (760.0, 900.0)
    short = Link(id="s", length=100.0)
    assert segment_vehicle_window(short, SegmentationStrategy.parse("S3")) == (0.0, 100.0)
    assert segment_vehicle_window(link, SegmentationStrategy.parse(300)) == (600.0, 900.0)


def test_segmentation_tags():
    assert SegmentationStrategy.parse("S1").length == 90.0
    assert SegmentationStrategy.parse("S4").length == 420.0
    assert SegmentationStrategy.parse("S5").length == 560.0
    assert SegmentationStrategy.parse("S0").length is None
    with pytest.raises(Exception):
        SegmentationStrategy.parse("S9")
    with pytest.raises(Exception):
        SegmentationStrategy.parse(-10)


def test_validate_cli_fixture_files():
    for name in ("cross.yaml", "starvation.yaml", "corridor.yaml"):
        sc = load_scenario(scenario_path(name))
        assert sc.network.validate() == []

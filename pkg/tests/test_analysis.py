import numpy as np
import pytest

from mptransit import (
    World,
    admissible_region_check,
    detect_starvation,
    lyapunov_value,
    metrics_frame,
    stability_verdict,
)
from mptransit.analysis import (
    RegionCheckError,
    demand_vector_from_scenario,
    pairwise_lyapunov_term,
    regression_slope,
)
from mptransit.network import Link, Movement, Network, Phase, SignalNode
from mptransit.simulation import CAR, QUEUED, TRANSIT, Vehicle


def one_node_network(c_vps=0.5, r=0.0, phases=(("i>o",),)):
    links = [Link(id="i", length=300.0, to_node="X"),
             Link(id="o", length=300.0, from_node="X")]
    movements = [Movement(in_link="i", out_link="o", node="X",
                          sat_flow=c_vps, turn_ratio=1.0)]
    node = SignalNode(id="X", phases=[Phase(node="X", index=k, movements=p)
                                      for k, p in enumerate(phases)])
    return Network(links, movements, [node])


def test_metrics_frame_empty(cross_scenario):
    w = World(cross_scenario.scale_demand(0.0), 1)
    f = metrics_frame(w)
    assert f.vehicle_count == 0 and f.spillover_count == 0
    assert f.unserved_count == 0
    assert f.delay_cv == f.delay_nv == f.delay_transit == f.passenger_delay == 0.0


def test_metrics_car_vs_passenger_delay(cross_scenario):
    w = World(cross_scenario.scale_demand(0.0), 1)
    car = Vehicle(1, CAR, True, 1, 0.0)
    car.link = "N_in"
    car.out_link = "S_out"
    car.state = QUEUED
    w.links["N_in"].queue.append(car)
    w.on_network += 1
    for _ in range(30):
        w.step(1.0, {"X": 1})
    # one car delayed 30 s: vehicle delay 30, passenger delay untouched
    assert w.delay_cv == pytest.approx(30.0)
    assert w.passenger_delay == 0.0
    bus = Vehicle(2, TRANSIT, True, 20, 0.0, route=["N_in", "S_out"], line=None)
    bus.link = "N_in"
    bus.out_link = "S_out"
    bus.state = QUEUED
    w.links["N_in"].queue.append(bus)
    w.on_network += 1
    before = w.passenger_delay
    for _ in range(10):
        w.step(1.0, {"X": 1})
    # bus with 20 aboard delayed 10 s adds 200 person-seconds
    assert w.passenger_delay - before == pytest.approx(200.0)
    assert w.delay_transit == pytest.approx(10.0)


def test_unserved_identity_over_run(cross_scenario):
    from mptransit import simulate_run
    r = simulate_run(cross_scenario.scale_demand(1.1), 3, with_lyapunov=False)
    for f in r.frames:
        assert f.unserved_count == f.vehicle_count + f.spillover_count


def test_lyapunov_examples(cross_scenario):
    sc = cross_scenario.scale_demand(0.0)
    w = World(sc, 1)
    assert lyapunov_value(w).value == 0.0
    # a source backlog of 4 contributes half of 4 squared
    for i in range(4):
        w.sources["N_in"].push(Vehicle(i, CAR, False, 1, 0.0))
        w.created += 1
    sample = lyapunov_value(w)
    assert sample.value == pytest.approx(8.0)
    assert sample.contributions["source>N_in"] == pytest.approx(8.0)


def test_lyapunov_two_vehicle_example(cross_scenario):
    sc = cross_scenario.scale_demand(0.0)
    w = World(sc, 1)
    # two vehicles with tau 0.5 and 1.5: contribution N * sum(tau) = 2 * 2 = 4
    ett = w.links["N_in"].link.fftt
    for i, tau_v in enumerate((0.5, 1.5)):
        v = Vehicle(i, CAR, False, 1, -tau_v * ett)
        v.link = "N_in"
        v.out_link = "S_out"
        v.x = 10.0 + i
        v.state = 0
        w.links["N_in"].moving.append(v)
        w.on_network += 1
    sample = lyapunov_value(w)
    assert sample.value == pytest.approx(4.0)
    # pair-sum identity against the explicit double sum
    assert pairwise_lyapunov_term([0.5, 1.5]) == pytest.approx(4.0)


def test_lyapunov_pair_sum_identity_random():
    rng = np.random.default_rng(12)
    for _ in range(200):
        taus = rng.uniform(0, 5, size=int(rng.integers(1, 40)))
        compact = len(taus) * float(taus.sum())
        explicit = pairwise_lyapunov_term(taus)
        assert abs(explicit - compact) <= 1e-12 * max(1.0, abs(explicit))


def test_stability_verdict():
    t = list(range(0, 3000, 10))
    flat = [50 + (i % 7) for i in range(len(t))]
    verdict, slope = stability_verdict(t, flat)
    assert verdict == "stable"
    growing = [50 + 0.1 * ti for ti in t]
    verdict, slope = stability_verdict(t, growing)
    assert verdict == "unstable" and slope == pytest.approx(0.1, abs=1e-9)
    verdict, _ = stability_verdict([0, 10], [1, 2])
    assert verdict == "inconclusive"
    # intermediate slopes are inconclusive
    mid = [50 + 0.02 * ti for ti in t]
    assert stability_verdict(t, mid)[0] == "inconclusive"


def test_regression_slope_basics():
    assert regression_slope([0, 1, 2], [0, 2, 4]) == pytest.approx(2.0)
    assert regression_slope([0], [3]) == 0.0


def test_admissible_region_single_movement():
    net = one_node_network(c_vps=0.5)
    cert = admissible_region_check(net, {"i>o": 0.2})
    assert cert.feasible and cert.epsilon == pytest.approx(0.3, abs=1e-8)
    # demand above capacity: epsilon goes negative
    cert = admissible_region_check(net, {"i>o": 0.6})
    assert not cert.feasible and cert.epsilon == pytest.approx(-0.1, abs=1e-8)
    # reduced region under heterogeneous penetration shrinks the boundary 5x
    cert = admissible_region_check(net, {"i>o": 0.0999 * 0.5 / 5}, pi_min=0.1, pi_max=0.5)
    assert cert.feasible
    cert = admissible_region_check(net, {"i>o": 0.11}, pi_min=0.1, pi_max=0.5)
    assert not cert.feasible
    boundary = admissible_region_check(net, {"i>o": 0.1}, pi_min=0.1, pi_max=0.5)
    assert boundary.epsilon == pytest.approx(0.0, abs=1e-8)


def test_admissible_region_zero_demand_always_feasible(cross_scenario, corridor_scenario):
    for sc in (cross_scenario, corridor_scenario):
        cert = admissible_region_check(sc.network, {})
        assert cert.feasible and cert.epsilon > 0


def test_admissible_region_cross_hand_lp(cross_scenario):
    """Hand solution of the cross fixture LP: with symmetric demand a per
    approach and 50/50 shares, epsilon = (0.25 - a) / 2."""
    net = cross_scenario.network
    for scale in (0.5, 0.9, 1.0, 1.3):
        a = 0.25 * scale
        demand = {net.source_movement_id(l): a
                  for l in ("N_in", "S_in", "E_in", "W_in")}
        cert = admissible_region_check(net, demand)
        assert cert.epsilon == pytest.approx((0.25 - a) / 2, abs=1e-7), scale
        assert cert.feasible == (scale < 1.0)
        shares = cert.weights["X"]
        assert sum(shares) == pytest.approx(1.0)


def test_admissible_region_unknown_movement():
    net = one_node_network()
    with pytest.raises(RegionCheckError):
        admissible_region_check(net, {"nope>x": 0.1})


def test_demand_vector_from_scenario(corridor_scenario):
    demand = demand_vector_from_scenario(corridor_scenario)
    assert demand["source>Bn_in"] > 0
    # transit dispatch adds 1/headway on its entry link
    assert demand["source>W_in"] > 0.05   # cars dominate
    wins = [d for d in corridor_scenario.demand if d.entry_link == "W_in"]
    base = sum(r * (t1 - t0) for d in wins
               for (t0, r), (t1, _) in zip(d.profile, d.profile[1:] + [(10800, 0)]))
    assert demand["source>W_in"] == pytest.approx(base / 10800 + 1 / 360.0)


def test_detect_starvation_rules():
    times = [float(t) for t in range(0, 1300, 10)]
    n = len(times)
    # movement with queue served at least once per window: not flagged
    signals = {"a": [1 if i % 30 == 0 else 0 for i in range(n)]}
    queues = {"a": [3] * n}
    assert detect_starvation(times, signals, queues, window=600.0) == []
    # queued movement red for a full window: flagged at the first queued step
    signals = {"a": [0] * n}
    flagged = detect_starvation(times, signals, queues, window=600.0)
    assert flagged == [("a", 0.0)]
    # red but empty: not flagged
    queues = {"a": [0] * n}
    assert detect_starvation(times, signals, queues, window=600.0) == []
    # window extending past the recorded horizon does not count
    times_short = [float(t) for t in range(0, 300, 10)]
    m = len(times_short)
    assert detect_starvation(times_short, {"a": [0] * m}, {"a": [5] * m},
                             window=600.0) == []

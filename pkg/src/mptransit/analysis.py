"""Metrics, stability instrumentation and the queue-starvation detector."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .network import Network
from . import simulation as sim
from .controllers import beta

# Default slopes (veh/s) separating the stability verdicts.
SLOPE_STABLE = 0.005
SLOPE_UNSTABLE = 0.05
STARVATION_WINDOW = 600.0   # s


@dataclass
class MetricsFrame:
    """Counters sampled once per decision step."""

    t: float
    vehicle_count: int          # vehicles on the network
    spillover_count: int        # vehicles blocked at sources
    delay_cv: float             # cumulative, s (connected private cars)
    delay_nv: float
    delay_transit: float
    passenger_delay: float      # cumulative, person-s
    lyapunov: float = 0.0

    @property
    def unserved_count(self) -> int:
        return self.vehicle_count + self.spillover_count

    CSV_HEADER = ("t,vehicle_count,spillover_count,unserved_count,"
                  "delay_cv,delay_nv,delay_transit,passenger_delay,lyapunov")

    def csv_row(self) -> str:
        return ",".join([
            repr(self.t), str(self.vehicle_count), str(self.spillover_count),
            str(self.unserved_count), repr(self.delay_cv), repr(self.delay_nv),
            repr(self.delay_transit), repr(self.passenger_delay),
            repr(self.lyapunov)])


def metrics_frame(world) -> MetricsFrame:
    """Snapshot of the world's running counters."""
    return MetricsFrame(
        t=world.t,
        vehicle_count=world.on_network,
        spillover_count=world.backlog_total(),
        delay_cv=world.delay_cv,
        delay_nv=world.delay_nv,
        delay_transit=world.delay_transit,
        passenger_delay=world.passenger_delay,
    )


@dataclass
class LyapunovSample:
    t: float
    value: float
    contributions: dict[str, float] = field(default_factory=dict)


def lyapunov_value(world) -> LyapunovSample:
    """Quadratic queue functional: half the squared source backlogs plus, per
    movement, vehicle count times the travel-time-weighted state.

    The movement term is the vehicular evaluation of the symmetrized double
    integral of weighted density, which collapses to N * sum(beta*tau) over
    all vehicles (full observation, penetration-independent).
    """
    contributions = {}
    total = 0.0
    for src in world.sources.values():
        c = 0.5 * len(src.backlog) ** 2
        contributions[src.movement_id] = c
        total += c
    t = world.t
    world.refresh_positions()
    per_movement: dict[str, list[float]] = {}
    for lid, ls in world.links.items():
        last_station = ls.link.last_station
        ett = ls.link.fftt
        for v in ls.vehicles():
            if v.out_link is None:
                continue
            mid = f"{lid}>{v.out_link}"
            if mid not in world.net.movements:
                continue
            b = beta(v.vclass == sim.TRANSIT, v.x, last_station)
            per_movement.setdefault(mid, []).append(b * (t - v.entry_time) / ett)
    for mid, taus in per_movement.items():
        c = len(taus) * sum(taus)
        contributions[mid] = c
        total += c
    return LyapunovSample(t=t, value=total, contributions=contributions)


def pairwise_lyapunov_term(weighted_taus) -> float:
    """O(N^2) oracle for one movement's Lyapunov contribution."""
    vals = list(weighted_taus)
    total = 0.0
    for a in vals:
        for b in vals:
            total += 0.5 * (a + b)
    return total


def regression_slope(times, values) -> float:
    """OLS slope of values against time, in value units per second."""
    t = np.asarray(times, dtype=float)
    y = np.asarray(values, dtype=float)
    if len(t) < 2:
        return 0.0
    t = t - t.mean()
    denom = float((t * t).sum())
    if denom == 0:
        return 0.0
    return float((t * (y - y.mean())).sum() / denom)


def stability_verdict(times, unserved, window=None, s_lo=SLOPE_STABLE,
                      s_hi=SLOPE_UNSTABLE) -> tuple[str, float]:
    """Slope test on the total-queue series over a post-warmup window.

    Returns (verdict, slope) with verdict one of stable / unstable /
    inconclusive.
    """
    times = list(times)
    unserved = list(unserved)
    if window is not None:
        lo, hi = window
        pairs = [(t, u) for t, u in zip(times, unserved) if lo <= t <= hi]
        if len(pairs) < 10:
            return "inconclusive", 0.0
        times = [p[0] for p in pairs]
        unserved = [p[1] for p in pairs]
    elif len(times) < 10:
        return "inconclusive", 0.0
    slope = regression_slope(times, unserved)
    if slope <= s_lo:
        return "stable", slope
    if slope >= s_hi:
        return "unstable", slope
    return "inconclusive", slope


@dataclass
class RegionCertificate:
    feasible: bool
    epsilon: float                      # veh/s margin; > 0 means admissible
    weights: dict[str, list[float]]     # node -> phase time shares
    source_shares: dict[str, float]
    status: str

    def report(self) -> str:
        lines = [f"feasible: {self.feasible}", f"epsilon_veh_s: {self.epsilon!r}"]
        for nid in sorted(self.weights):
            shares = ", ".join(f"{w:.6f}" for w in self.weights[nid])
            lines.append(f"node {nid}: [{shares}]")
        for sid in sorted(self.source_shares):
            lines.append(f"{sid}: {self.source_shares[sid]:.6f}")
        return "\n".join(lines)


class RegionCheckError(RuntimeError):
    pass


def admissible_region_check(network: Network, demand: dict[str, float],
                            pi_min: float | None = None,
                            pi_max: float | None = None) -> RegionCertificate:
    """Maximize the margin epsilon subject to demand plus epsilon being
    dominated by the routed net service under some per-node convex combination
    of phases.

    `demand` maps movement ids (and/or "source><link>" ids) to arrival rates in
    veh/s. When both penetration bounds are given, the service side is scaled
    by pi_min/pi_max (the reduced region under heterogeneous penetration).
    Fictitious sources have a free service share in [0, 1]: the point queue
    can always idle, so its steady-state service matches its throughput.
    """
    kappa = 1.0
    if pi_min is not None and pi_max is not None:
        if not (0 < pi_min <= pi_max <= 1):
            raise RegionCheckError(f"need 0 < pi_min <= pi_max <= 1, got {pi_min}, {pi_max}")
        kappa = pi_min / pi_max

    source_ids = sorted(sid for sid in demand if sid.startswith("source>"))
    for sid in source_ids:
        entry = sid.split(">", 1)[1]
        if entry not in network.links:
            raise RegionCheckError(f"demand names unknown entry link in {sid}")
    movement_ids = list(network.movements)
    for mid in demand:
        if mid not in network.movements and mid not in source_ids:
            raise RegionCheckError(f"demand names unknown movement {mid}")
    rows = movement_ids + source_ids

    node_ids = sorted(network.nodes)
    x_index: dict[tuple[str, int], int] = {}
    nvar = 1   # eps first
    for nid in node_ids:
        for p in network.nodes[nid].phases:
            x_index[(nid, p.index)] = nvar
            nvar += 1
    s_index = {sid: nvar + i for i, sid in enumerate(source_ids)}
    nvar += len(source_ids)

    def service_coeffs(mid):
        """Variable coefficients of c_m * sbar_m."""
        if mid in s_index:
            entry = mid.split(">", 1)[1]
            return [(s_index[mid], network.source_rate(entry))]
        m = network.movements[mid]
        out = []
        for p in network.nodes[m.node].phases:
            if mid in p.movements:
                out.append((x_index[(m.node, p.index)], m.sat_flow))
        return out

    # a_m + eps <= kappa * (c_m sbar_m - routed inflow)
    A_ub, b_ub = [], []
    row_of = {mid: i for i, mid in enumerate(rows)}
    for mid in rows:
        row = [0.0] * nvar
        row[0] = 1.0
        for var, coef in service_coeffs(mid):
            row[var] -= kappa * coef
        A_ub.append(row)
        b_ub.append(-demand.get(mid, 0.0))
    # Routed inflow: every movement contributes r of its service to each
    # successor movement on its outgoing link.
    for mid in rows:
        if mid in s_index:
            out_link = mid.split(">", 1)[1]
        else:
            out_link = network.movements[mid].out_link
        for succ in network.movements_from(out_link):
            succ_row = row_of[succ.id]
            for var, coef in service_coeffs(mid):
                A_ub[succ_row][var] += kappa * succ.turn_ratio * coef

    A_eq, b_eq = [], []
    for nid in node_ids:
        row = [0.0] * nvar
        for p in network.nodes[nid].phases:
            row[x_index[(nid, p.index)]] = 1.0
        A_eq.append(row)
        b_eq.append(1.0)

    bounds = [(None, None)] + [(0.0, 1.0)] * (nvar - 1)
    c = [0.0] * nvar
    c[0] = -1.0
    res = linprog(c, A_ub=np.array(A_ub), b_ub=np.array(b_ub),
                  A_eq=np.array(A_eq), b_eq=np.array(b_eq),
                  bounds=bounds, method="highs")
    if not res.success:
        raise RegionCheckError(f"LP solver failed: {res.message}")
    eps = float(res.x[0])
    weights = {}
    for nid in node_ids:
        weights[nid] = [float(res.x[x_index[(nid, p.index)]])
                        for p in network.nodes[nid].phases]
    shares = {sid: float(res.x[s_index[sid]]) for sid in source_ids}
    return RegionCertificate(feasible=eps > 1e-9, epsilon=eps, weights=weights,
                             source_shares=shares, status=res.message)


def demand_vector_from_scenario(scenario, horizon: float | None = None) -> dict[str, float]:
    """Time-average source demand rates (veh/s) over the horizon, including
    transit dispatch rates on their entry links."""
    horizon = horizon if horizon is not None else scenario.sim.horizon
    out: dict[str, float] = {}
    for d in scenario.demand:
        total = 0.0
        profile = d.profile + [(horizon, 0.0)]
        for (t0, r), (t1, _) in zip(profile, profile[1:]):
            t1 = min(t1, horizon)
            if t1 > t0:
                total += r * (t1 - t0)
        sid = scenario.network.source_movement_id(d.entry_link)
        out[sid] = out.get(sid, 0.0) + total / horizon
    for line in scenario.transit.lines:
        sid = scenario.network.source_movement_id(line.route[0])
        out[sid] = out.get(sid, 0.0) + 1.0 / line.headway
    return out


def detect_starvation(times, signal_history: dict[str, list[int]],
                      queue_history: dict[str, list[int]],
                      window: float = STARVATION_WINDOW) -> list[tuple[str, float]]:
    """Movements that hold a queue while never receiving green for a full
    observation window.

    Histories are aligned per decision step. Returns (movement id, first
    starved time); only windows fully inside the recorded horizon count.
    """
    flagged = []
    for mid, signals in signal_history.items():
        queues = queue_history[mid]
        n = min(len(times), len(signals), len(queues))
        ts = list(times)[:n]
        signals = signals[:n]
        queues = queues[:n]
        # red_run[i]: number of consecutive s == 0 entries starting at i
        red_run = [0] * (n + 1)
        for i in range(n - 1, -1, -1):
            red_run[i] = red_run[i + 1] + 1 if signals[i] == 0 else 0
        hit = None
        for i in range(n):
            if queues[i] <= 0 or signals[i] != 0:
                continue
            if ts[i] + window > ts[-1]:
                break
            # number of recorded steps inside [t_i, t_i + window]
            j = i
            while j + 1 < n and ts[j + 1] <= ts[i] + window:
                j += 1
            if red_run[i] >= j - i + 1:
                hit = ts[i]
                break
        if hit is not None:
            flagged.append((mid, hit))
    return flagged

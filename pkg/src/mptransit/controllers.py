"""Max-pressure controllers: pressure calculators and per-node phase selection.

All pressure functions are pure functions of an observation snapshot, so every
node can be evaluated independently. The observation builder is the only part
that reads the simulation world.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import sqrt

from .estimation import (
    ErrorModel,
    HistoricalStats,
    iqa_step,
    stopped_cv_expansion,
    tau_hat,
)
from .network import ConfigurationError, Network, segment_vehicle_window
from .scenario import ControllerConfig
from . import simulation as sim


def tau(ltt: float, ett: float) -> float:
    """Link travel time normalized by the expected free-flow travel time."""
    if ett <= 0:
        raise ConfigurationError(f"expected free-flow travel time must be > 0, got {ett}")
    return ltt / ett


def beta(is_transit: bool, x: float, last_station: float | None) -> int:
    """Position gate: transit contributes only at/past the station nearest
    the stopline. Links without a station treat all transit as past-station."""
    if not is_transit:
        return 1
    if last_station is None or x >= last_station:
        return 1
    return 0


def expected_arrival_time(x: float, last_station: float | None, link_length: float,
                          speed: float, theta: float, remaining_dwell: float) -> float:
    """Stopline ETA of a transit vehicle, with a buffer for speed changes."""
    if last_station is not None and x <= last_station:
        return ((last_station - x) / speed + remaining_dwell
                + (link_length - last_station) / speed + theta)
    return (link_length - x) / speed + theta


def beta_eta(is_transit: bool, x: float, last_station: float | None,
             link_length: float, speed: float, t0: float, theta: float,
             remaining_dwell: float) -> int:
    """ETA gate: transit contributes iff it can reach the stopline within the
    upcoming decision step."""
    if not is_transit:
        return 1
    eat = expected_arrival_time(x, last_station, link_length, speed, theta,
                                remaining_dwell)
    return 1 if eat < t0 else 0


@dataclass
class CvObs:
    """One connected vehicle as seen by the controller."""

    x: float
    ltt: float
    tau: float
    occupancy: float
    beta: int
    is_transit: bool


@dataclass
class MovementObservation:
    """Everything a pressure calculator may need for one movement."""

    movement_id: str
    sat_flow: float
    up: list[CvObs]
    # (downstream movement id, turning ratio, its CV list)
    down: list[tuple[str, float, list[CvObs]]]
    len_in: float
    len_out: float
    p_hat: float | None = None       # historical mean occupancy
    tau_hat_val: float | None = None  # historical fallback state


@dataclass
class NodeObservation:
    node_id: str
    phases: list[tuple[str, ...]]    # movement ids per phase
    current_phase: int
    obs: dict[str, MovementObservation] = field(default_factory=dict)


@dataclass
class MovementWeights:
    up: float
    down: float
    up_raw: float    # unweighted upstream state used by the forced-zero rule
    c: float         # saturation actually applied (0 when forced)

    @property
    def pressure(self) -> float:
        return self.c * (self.up - self.down)

    @property
    def raw_pressure(self) -> float:
        return self.c * (self.up_raw - self.down)


@dataclass
class PressureTable:
    node_id: str
    weights: dict[str, MovementWeights]
    phase_pressures: list[float]


def _phase_pressures(nobs: NodeObservation, weights) -> list[float]:
    return [sum(weights[m].pressure for m in phase) for phase in nobs.phases]


def _down_state(mobs: MovementObservation, use_beta: bool) -> float:
    total = 0.0
    for _, r, cvs in mobs.down:
        if use_beta:
            total += r * sum(cv.beta * cv.tau for cv in cvs)
        else:
            total += r * sum(cv.tau for cv in cvs)
    return total


def cvmp_pressure(nobs: NodeObservation) -> PressureTable:
    """Travel-time pressure from CV data only; no occupancy, no station gate."""
    weights = {}
    for mid, mobs in nobs.obs.items():
        up = sum(cv.tau for cv in mobs.up)
        down = _down_state(mobs, use_beta=False)
        weights[mid] = MovementWeights(up=up, down=down, up_raw=up, c=mobs.sat_flow)
    return PressureTable(nobs.node_id, weights, _phase_pressures(nobs, weights))


def transit_pressure(nobs: NodeObservation) -> PressureTable:
    """Occupancy-weighted travel-time pressure with the station gate.

    The saturation flow of a movement is forced to zero whenever the
    unweighted upstream state falls below the downstream state, which keeps
    every served movement's pressure non-negative.
    """
    weights = {}
    for mid, mobs in nobs.obs.items():
        up = sum(cv.beta * cv.occupancy * cv.tau for cv in mobs.up)
        up_raw = sum(cv.beta * cv.tau for cv in mobs.up)
        down = _down_state(mobs, use_beta=True)
        c = 0.0 if up_raw - down < 0 else mobs.sat_flow
        weights[mid] = MovementWeights(up=up, down=down, up_raw=up_raw, c=c)
    return PressureTable(nobs.node_id, weights, _phase_pressures(nobs, weights))


def occ_pressure(nobs: NodeObservation) -> PressureTable:
    """Count-based pressure weighted by mean upstream occupancy and the
    inverse square root of the link length."""
    weights = {}
    for mid, mobs in nobs.obs.items():
        p_bar = _mean_occupancy(mobs)
        up = p_bar * len(mobs.up) / sqrt(mobs.len_in)
        down = 0.0
        for _, r, cvs in mobs.down:
            down += r * len(cvs)
        down = p_bar * down / sqrt(mobs.len_out) if mobs.down else 0.0
        weights[mid] = MovementWeights(up=up, down=down, up_raw=up, c=mobs.sat_flow)
    return PressureTable(nobs.node_id, weights, _phase_pressures(nobs, weights))


def eocc_pressure(nobs: NodeObservation) -> PressureTable:
    """Occupancy-count pressure with the station gate applied to the counts."""
    weights = {}
    for mid, mobs in nobs.obs.items():
        p_bar = _mean_occupancy(mobs)
        up = p_bar * sum(cv.beta for cv in mobs.up) / sqrt(mobs.len_in)
        down = 0.0
        for _, r, cvs in mobs.down:
            down += r * sum(cv.beta for cv in cvs)
        down = p_bar * down / sqrt(mobs.len_out) if mobs.down else 0.0
        weights[mid] = MovementWeights(up=up, down=down, up_raw=up, c=mobs.sat_flow)
    return PressureTable(nobs.node_id, weights, _phase_pressures(nobs, weights))


def mtransit_pressure(nobs: NodeObservation, clamp_fallback: bool = True) -> PressureTable:
    """Transit pressure with the historical fallback on CV-empty movements.

    The upstream state substitutes the occupancy-scaled travel-time estimate
    when no CVs are visible; the downstream state is always CV-based.
    """
    weights = {}
    for mid, mobs in nobs.obs.items():
        down = _down_state(mobs, use_beta=True)
        if not mobs.up:
            th = mobs.tau_hat_val or 0.0
            ph = mobs.p_hat if mobs.p_hat is not None else 1.0
            up = ph * th
            up_raw = th
            forced = clamp_fallback and (up_raw - down < 0)
        else:
            up = sum(cv.beta * cv.occupancy * cv.tau for cv in mobs.up)
            up_raw = sum(cv.beta * cv.tau for cv in mobs.up)
            forced = up_raw - down < 0
        c = 0.0 if forced else mobs.sat_flow
        weights[mid] = MovementWeights(up=up, down=down, up_raw=up_raw, c=c)
    return PressureTable(nobs.node_id, weights, _phase_pressures(nobs, weights))


def _mean_occupancy(mobs: MovementObservation) -> float:
    if mobs.up:
        return sum(cv.occupancy for cv in mobs.up) / len(mobs.up)
    if mobs.p_hat is not None:
        return mobs.p_hat
    return 1.0


PRESSURE_FUNCTIONS = {
    "cv-mp": cvmp_pressure,
    "transit-mp": transit_pressure,
    "occ-mp": occ_pressure,
    "eocc-mp": eocc_pressure,
    "mtransit-mp": mtransit_pressure,
}


def select_phases(tables: dict[str, PressureTable],
                  current: dict[str, int]) -> dict[str, int]:
    """Per node independently: the phase with maximal pressure. Ties keep the
    currently active phase, then fall back to the lowest phase index."""
    decision = {}
    for nid, table in tables.items():
        pressures = table.phase_pressures
        best = max(pressures)
        cur = current.get(nid, 0)
        if cur < len(pressures) and pressures[cur] == best:
            decision[nid] = cur
        else:
            decision[nid] = pressures.index(best)
    return decision


class MaxPressureController:
    """Decision-step runtime for one run: observation assembly, historical
    state updates and phase selection."""

    def __init__(self, network: Network, config: ControllerConfig,
                 stats: HistoricalStats | None = None,
                 error_model: ErrorModel | None = None):
        if config.variant not in PRESSURE_FUNCTIONS:
            raise ConfigurationError(f"unknown controller variant {config.variant!r}")
        self.net = network
        self.config = config
        self.stats = stats
        self.error_model = error_model
        if config.variant == "mtransit-mp":
            if stats is None:
                raise ConfigurationError("mtransit-mp requires historical stats")
            missing = stats.covers(network.movements.keys())
            if missing:
                raise ConfigurationError(
                    "missing historical stats for movement(s): " + ", ".join(sorted(missing)))
        self.iqa: dict[str, float] = {m: 0.0 for m in network.movements}
        self.prev_signal: dict[str, int] = {m: 0 for m in network.movements}
        self._windows = {
            lid: segment_vehicle_window(l, config.segmentation)
            for lid, l in network.links.items() if not l.is_fictitious}

    # -- observation assembly --------------------------------------------------

    def _scan(self, world):
        """One pass over all vehicles: windowed CV observations per movement
        plus full-link stopped counts (CV and total) for the queue anchor."""
        cfg = self.config
        eta_mode = cfg.beta_mode == "eta"
        t = world.t
        cvs: dict[str, list[CvObs]] = {m: [] for m in self.net.movements}
        stopped: dict[str, int] = {m: 0 for m in self.net.movements}
        stopped_all: dict[str, int] = {m: 0 for m in self.net.movements}
        for lid, ls in world.links.items():
            link = ls.link
            x_lo = self._windows[lid][0]
            ett = link.fftt
            last_station = link.last_station
            for v in ls.vehicles():
                if v.out_link is None:
                    continue
                mid = f"{lid}>{v.out_link}"
                if mid not in cvs:
                    continue
                if v.state == sim.QUEUED:
                    stopped_all[mid] += 1
                if not v.is_cv:
                    continue
                lst = cvs[mid]
                if v.state == sim.QUEUED:
                    stopped[mid] += 1
                if v.x < x_lo:
                    continue
                is_transit = v.vclass == sim.TRANSIT
                if eta_mode:
                    b = beta_eta(is_transit, v.x, last_station, link.length,
                                 link.free_flow_speed, cfg.decision_step,
                                 cfg.eta_buffer, self._dwell_estimate(world, v))
                else:
                    b = beta(is_transit, v.x, last_station)
                ltt = t - v.entry_time
                lst.append(CvObs(x=v.x, ltt=ltt, tau=ltt / ett,
                                 occupancy=float(v.occupancy), beta=b,
                                 is_transit=is_transit))
        return cvs, stopped, stopped_all

    def _dwell_estimate(self, world, v) -> float:
        """Known or anticipated remaining dwell of a transit vehicle before it
        clears the station nearest the stopline of its current link."""
        if v.vclass != sim.TRANSIT:
            return 0.0
        if v.state == sim.DWELLING and v.remaining_dwell > 0:
            return v.remaining_dwell
        stop = world._next_stop_on_link(v)
        if stop is None:
            return 0.0
        si = stop[0]
        line_state = world.lines[v.line]
        cfg = world.scenario.transit
        waiting = sum(int(w) for w in line_state.waiting[si])
        alight = int(v.onboard.get(si, 0)) if v.onboard else 0
        return cfg.dwell_base + cfg.dwell_per_pax * (waiting + alight)

    def _update_iqa(self, world, stopped, stopped_all) -> dict[str, tuple[float, float]]:
        """Advance the expected-queue recursion; returns per movement the
        (tau_hat, p_hat) pair for the fallback upstream state."""
        t = world.t
        t0 = self.config.decision_step
        mode = self.config.anchor
        rng = world.rng_error
        out = {}
        for mid, m in self.net.movements.items():
            lam, psi, p_hat, lam_dep = self.stats.lookup(mid, t)
            if self.error_model is not None:
                lam = max(1e-9, self.error_model.inject(lam, rng))
            anchor = None
            if mode == "cv_expansion" and stopped[mid] > 0:
                anchor = stopped_cv_expansion(stopped[mid], psi)
            elif mode == "true_queue":
                anchor = float(stopped_all[mid])
            if anchor is not None and self.error_model is not None:
                anchor = max(0.0, self.error_model.inject(anchor, rng))
            eq = iqa_step(self.iqa[mid], self.prev_signal[mid], lam, lam_dep,
                          t0, cv_anchor=anchor)
            self.iqa[mid] = eq
            out[mid] = (tau_hat(eq, psi, lam, self.net.ett(m)), p_hat)
        return out

    def observe(self, world) -> dict[str, NodeObservation]:
        world.refresh_positions()
        cvs, stopped, stopped_all = self._scan(world)
        fallback = {}
        if self.config.variant == "mtransit-mp":
            fallback = self._update_iqa(world, stopped, stopped_all)
        nodes = {}
        for nid, node in self.net.nodes.items():
            nobs = NodeObservation(
                node_id=nid,
                phases=[p.movements for p in node.phases],
                current_phase=world.active_phase[nid])
            for m in self.net.movements_at(nid):
                down = [(m2.id, m2.turn_ratio, cvs[m2.id])
                        for m2 in self.net.movements_from(m.out_link)]
                p_hat = None
                th = None
                if m.id in fallback:
                    th, p_hat = fallback[m.id]
                elif self.stats is not None and m.id in self.stats.by_movement:
                    _, _, p_hat, _ = self.stats.lookup(m.id, world.t)
                nobs.obs[m.id] = MovementObservation(
                    movement_id=m.id,
                    sat_flow=m.sat_flow,
                    up=cvs[m.id],
                    down=down,
                    len_in=self.net.links[m.in_link].length,
                    len_out=self.net.links[m.out_link].length,
                    p_hat=p_hat,
                    tau_hat_val=th)
            nodes[nid] = nobs
        return nodes

    # -- decision ----------------------------------------------------------------

    def pressure_tables(self, observations) -> dict[str, PressureTable]:
        fn = PRESSURE_FUNCTIONS[self.config.variant]
        if self.config.variant == "mtransit-mp":
            return {nid: fn(nobs, self.config.clamp_fallback)
                    for nid, nobs in observations.items()}
        return {nid: fn(nobs) for nid, nobs in observations.items()}

    def decide(self, world) -> tuple[dict[str, int], dict[str, PressureTable]]:
        observations = self.observe(world)
        tables = self.pressure_tables(observations)
        decision = select_phases(tables, world.active_phase)
        for nid, phase_idx in decision.items():
            served = set(self.net.nodes[nid].phases[phase_idx].movements)
            for m in self._node_movement_ids(nid):
                self.prev_signal[m] = 1 if m in served else 0
        return decision, tables

    def _node_movement_ids(self, nid):
        return [m.id for m in self.net.movements_at(nid)]

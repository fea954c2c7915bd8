"""Time-stepped mesoscopic traffic dynamics.

Vehicles advance at free-flow speed until they reach the back of the stopline
queue, which is stored as a stack packed at jam spacing. Discharge under the
active phase respects the saturation-flow budget, downstream spare capacity
and vehicle availability. Source links are point queues of unbounded size;
entries blocked by a full entry link are the spillover count.
"""

from __future__ import annotations

from collections import deque

import numpy as np

from .network import ConfigurationError, Network
from .scenario import Scenario

CAR = 0
TRANSIT = 1

MOVING = 0
QUEUED = 1
DWELLING = 2

_DWELL_PENDING = -1.0


def effective_saturation(c_hat: float, switching: bool, t0: float,
                         ty: float, tl: float) -> float:
    """Saturation flow discounted for yellow and start-up lost time.

    Applied over the decision interval in which the phase changed.
    """
    if not t0 > ty + tl >= 0:
        raise ConfigurationError(
            f"need decision_step > yellow + startup_lost >= 0, got {t0}, {ty}, {tl}")
    if switching:
        return c_hat * (t0 - ty - tl) / t0
    return c_hat


def sample_cv(is_transit: bool, pi_link: float, rng) -> bool:
    """Bernoulli CV flag, fixed for the vehicle lifetime. Transit is always CV."""
    if is_transit:
        return True
    return bool(rng.random() < pi_link)


class Vehicle:
    __slots__ = ("vid", "vclass", "is_cv", "occupancy", "link", "out_link",
                 "route", "route_idx", "entry_time", "x", "state",
                 "remaining_dwell", "delay", "created_at", "next_stop_idx",
                 "onboard", "line")

    def __init__(self, vid, vclass, is_cv, occupancy, created_at, route=None, line=None):
        self.vid = vid
        self.vclass = vclass
        self.is_cv = is_cv
        self.occupancy = occupancy       # persons incl. driver
        self.link = None                 # current link id
        self.out_link = None             # sampled / routed next link (None: leaves at link end)
        self.route = route               # transit only: full link sequence
        self.route_idx = 0
        self.entry_time = created_at     # current-link entry time
        self.x = 0.0
        self.state = MOVING
        self.remaining_dwell = 0.0
        self.delay = 0.0                 # cumulative control delay, s
        self.created_at = created_at
        self.next_stop_idx = 0           # transit: index into line.stops
        self.onboard = None              # transit: dest stop idx -> persons
        self.line = line


class LinkState:
    """Mutable per-link vehicle storage: moving, queued (packed) and dwelling."""

    __slots__ = ("link", "moving", "queue", "dwelling")

    def __init__(self, link):
        self.link = link
        self.moving: list[Vehicle] = []
        self.queue: list[Vehicle] = []      # index 0 = at the stopline
        self.dwelling: list[Vehicle] = []

    def count(self) -> int:
        return len(self.moving) + len(self.queue) + len(self.dwelling)

    def queue_boundary(self) -> float:
        """Position of the next free queue slot, measured from the inlet."""
        return self.link.length - len(self.queue) * self.link.jam_spacing

    def refresh_queue_positions(self):
        sp = self.link.jam_spacing
        length = self.link.length
        for idx, v in enumerate(self.queue):
            v.x = length - idx * sp

    def vehicles(self):
        yield from self.moving
        yield from self.queue
        yield from self.dwelling


class SourceQueue:
    """Point queue at a fictitious source link feeding one entry link."""

    __slots__ = ("entry_link", "movement_id", "backlog", "credit",
                 "cumulative_blocked", "released", "n_transit", "n_cv_car",
                 "pax_waiting")

    def __init__(self, entry_link: str, movement_id: str):
        self.entry_link = entry_link
        self.movement_id = movement_id
        self.backlog: deque[Vehicle] = deque()
        self.credit = 0.0
        self.cumulative_blocked = 0
        self.released = 0
        self.n_transit = 0
        self.n_cv_car = 0
        self.pax_waiting = 0

    def push(self, vehicle: Vehicle):
        self.backlog.append(vehicle)
        if vehicle.vclass == TRANSIT:
            self.n_transit += 1
            self.pax_waiting += vehicle.occupancy
        elif vehicle.is_cv:
            self.n_cv_car += 1

    def pop(self) -> Vehicle:
        v = self.backlog.popleft()
        if v.vclass == TRANSIT:
            self.n_transit -= 1
            self.pax_waiting -= v.occupancy
        elif v.is_cv:
            self.n_cv_car -= 1
        return v


class _LineState:
    __slots__ = ("line", "next_departure", "waiting", "carry", "boarded")

    def __init__(self, line):
        self.line = line
        self.next_departure = line.first_departure
        n = len(line.stops)
        # waiting[from_stop][to_stop]: accumulated persons.
        self.waiting = [[0.0] * n for _ in range(n)]
        self.carry = 0.0
        self.boarded = 0


class World:
    """Single-writer simulation state for one run."""

    def __init__(self, scenario: Scenario, seed: int):
        self.scenario = scenario
        self.net: Network = scenario.network
        self.ctrl = scenario.controller
        self.dt = scenario.sim.dt
        self.t = 0.0
        self.seed = seed
        ss = np.random.SeedSequence(seed)
        demand_ss, cv_ss, turn_ss, err_ss = ss.spawn(4)
        self.rng_demand = np.random.default_rng(demand_ss)
        self.rng_cv = np.random.default_rng(cv_ss)
        self.rng_turn = np.random.default_rng(turn_ss)
        self.rng_error = np.random.default_rng(err_ss)

        self.links: dict[str, LinkState] = {
            lid: LinkState(l) for lid, l in self.net.links.items() if not l.is_fictitious}
        self.sources: dict[str, SourceQueue] = {}
        for d in scenario.demand:
            self._ensure_source(d.entry_link)
        for line in scenario.transit.lines:
            self._ensure_source(line.route[0])
        self._demand_credit = {id(d): 0.0 for d in scenario.demand}
        self.lines = [_LineState(l) for l in scenario.transit.lines]
        self._stops_by_line_link: dict[tuple[int, str], list[tuple[int, float]]] = {}
        for li, ls in enumerate(self.lines):
            for si, stop in enumerate(ls.line.stops):
                self._stops_by_line_link.setdefault((li, stop.link), []).append(
                    (si, stop.position))
        for v in self._stops_by_line_link.values():
            v.sort(key=lambda p: p[1])

        # Signal state: one active phase per node.
        self.active_phase: dict[str, int] = {n: 0 for n in self.net.nodes}
        self.switch_until: dict[str, float] = {n: -1.0 for n in self.net.nodes}
        self.service_credit: dict[str, float] = {m: 0.0 for m in self.net.movements}
        self._node_movements: dict[str, list[str]] = {
            n: [m.id for m in self.net.movements_at(n)] for n in self.net.nodes}

        # Conservation and metric counters.
        self._next_vid = 0
        self.created = 0
        self.exited = 0
        self.on_network = 0
        self.delay_cv = 0.0        # connected private cars
        self.delay_nv = 0.0
        self.delay_transit = 0.0
        self.passenger_delay = 0.0  # person-seconds
        self.count_cv = 0
        self.count_nv = 0
        self.count_transit = 0
        self.initial_pax = 0
        self.departures: dict[str, int] = {m: 0 for m in self.net.movements}
        # Optional per-movement arrival instrumentation (calibration).
        self.arrival_log = None

    # -- construction helpers -------------------------------------------------

    def _ensure_source(self, entry_link: str):
        if entry_link not in self.sources:
            self.sources[entry_link] = SourceQueue(
                entry_link, self.net.source_movement_id(entry_link))

    def _new_vid(self) -> int:
        self._next_vid += 1
        return self._next_vid

    # -- queries ---------------------------------------------------------------

    def backlog_total(self) -> int:
        return sum(len(s.backlog) for s in self.sources.values())

    def movement_counts(self) -> dict[str, list[int]]:
        """Per movement: [total vehicles, CVs] currently on the incoming link."""
        out = {m: [0, 0] for m in self.net.movements}
        for ls in self.links.values():
            for v in ls.vehicles():
                if v.out_link is None:
                    continue
                mid = f"{v.link}>{v.out_link}"
                row = out.get(mid)
                if row is not None:
                    row[0] += 1
                    if v.is_cv:
                        row[1] += 1
        return out

    def refresh_positions(self):
        for ls in self.links.values():
            ls.refresh_queue_positions()

    # -- per-step dynamics -----------------------------------------------------

    def step(self, dt: float, decision: dict[str, int]) -> "World":
        """Advance the world by dt under the given per-node phase decision."""
        if dt <= 0:
            raise ConfigurationError(f"dt must be > 0, got {dt}")
        for nid in self.net.nodes:
            if nid not in decision:
                raise ConfigurationError(f"signal decision missing node {nid}")
        self._apply_decision(decision)
        self._generate_demand(dt)
        self._release_sources(dt)
        self._advance_vehicles(dt)
        transit_update(self, dt)
        self._discharge(dt)
        self._accrue_delay(dt)
        self.t += dt
        return self

    def _apply_decision(self, decision):
        t0 = self.ctrl.decision_step
        for nid, phase_idx in decision.items():
            if phase_idx != self.active_phase[nid]:
                self.active_phase[nid] = phase_idx
                self.switch_until[nid] = self.t + t0
                for m in self._node_movements[nid]:
                    self.service_credit[m] = 0.0

    def _generate_demand(self, dt):
        mode = self.scenario.sim.demand_mode
        for d in self.scenario.demand:
            rate = d.rate_at(self.t)
            if rate <= 0:
                continue
            if mode == "poisson":
                n = int(self.rng_demand.poisson(rate * dt))
            else:
                credit = self._demand_credit[id(d)] + rate * dt
                n = int(credit)
                self._demand_credit[id(d)] = credit - n
            if n == 0:
                continue
            src = self.sources[d.entry_link]
            pi = self.ctrl.pi_for(d.entry_link)
            for _ in range(n):
                v = Vehicle(self._new_vid(), CAR,
                            sample_cv(False, pi, self.rng_cv),
                            self.ctrl.car_occupancy, self.t)
                src.push(v)
                self.created += 1
                if v.is_cv:
                    self.count_cv += 1
                else:
                    self.count_nv += 1
        for li, ls in enumerate(self.lines):
            while ls.next_departure <= self.t:
                line = ls.line
                v = Vehicle(self._new_vid(), TRANSIT, True,
                            1 + line.initial_occupancy, self.t,
                            route=line.route, line=li)
                v.onboard = {0: line.initial_occupancy} if line.initial_occupancy else {}
                self.sources[line.route[0]].push(v)
                self.created += 1
                self.count_transit += 1
                self.initial_pax += line.initial_occupancy
                ls.next_departure += line.headway

    def _release_sources(self, dt):
        for src in self.sources.values():
            src.credit += self.net.source_rate(src.entry_link) * dt
            if not src.backlog:
                src.credit = min(src.credit, 1.0)
                continue
            ls = self.links[src.entry_link]
            cap = ls.link.capacity
            blocked = 0
            while src.credit >= 1.0 and src.backlog:
                if ls.count() >= cap:
                    blocked = min(len(src.backlog), int(src.credit))
                    break
                v = src.pop()
                src.credit -= 1.0
                src.released += 1
                self._enter_link(v, src.entry_link)
            src.cumulative_blocked += blocked
            src.credit = min(src.credit, 1.0)

    def _enter_link(self, v: Vehicle, link_id: str):
        v.link = link_id
        v.x = 0.0
        v.entry_time = self.t
        v.state = MOVING
        self.on_network += 1
        if v.vclass == TRANSIT:
            nxt = v.route[v.route_idx + 1] if v.route_idx + 1 < len(v.route) else None
            v.out_link = nxt
        else:
            v.out_link = self._sample_turn(link_id)
        self.links[link_id].moving.append(v)
        if self.arrival_log is not None:
            self.arrival_log(self, v, link_id)

    def _sample_turn(self, link_id: str):
        """Turn intention drawn at link entry from the turning ratios.

        The residual probability mass corresponds to flow that leaves the
        network at the end of the link without crossing the stopline.
        """
        movements = self.net.movements_from(link_id)
        if not movements:
            return None
        u = self.rng_turn.random()
        acc = 0.0
        for m in movements:
            acc += m.turn_ratio
            if u < acc:
                return m.out_link
        return None

    def _next_stop_on_link(self, v: Vehicle):
        """(stop_idx, position) of the vehicle's next unserved stop on its link."""
        stops = self._stops_by_line_link.get((v.line, v.link))
        if not stops:
            return None
        for si, pos in stops:
            if si >= v.next_stop_idx and pos >= v.x - 1e-9:
                return si, pos
        return None

    def _advance_vehicles(self, dt):
        for ls in self.links.values():
            if not ls.moving:
                continue
            link = ls.link
            speed = link.free_flow_speed
            boundary = ls.queue_boundary()
            still_moving = []
            for v in ls.moving:
                new_x = v.x + speed * dt
                if v.vclass == TRANSIT:
                    stop = self._next_stop_on_link(v)
                    if stop is not None and stop[1] <= new_x and stop[1] <= boundary + 1e-9:
                        v.x = stop[1]
                        v.state = DWELLING
                        v.remaining_dwell = _DWELL_PENDING
                        v.next_stop_idx = stop[0]
                        ls.dwelling.append(v)
                        continue
                if v.out_link is None:
                    # Exit-link traffic and flow that leaves the network before
                    # the stopline: traverses freely, never queues.
                    if new_x >= link.length:
                        self._exit_network(v)
                    else:
                        v.x = new_x
                        still_moving.append(v)
                elif new_x >= boundary - 1e-9:
                    v.state = QUEUED
                    v.x = link.length - len(ls.queue) * link.jam_spacing
                    ls.queue.append(v)
                    boundary = ls.queue_boundary()
                else:
                    v.x = new_x
                    still_moving.append(v)
            ls.moving = still_moving

    def _exit_network(self, v: Vehicle):
        self.on_network -= 1
        self.exited += 1
        v.link = None

    def _discharge(self, dt):
        factor = self.ctrl.lost_time_factor
        t0 = self.ctrl.decision_step
        for nid, node in self.net.nodes.items():
            phase = node.phases[self.active_phase[nid]]
            switching = self.t < self.switch_until[nid]
            for mid in phase.movements:
                m = self.net.movements[mid]
                c_eff = effective_saturation(m.sat_flow, switching, t0,
                                             self.ctrl.yellow, self.ctrl.startup_lost)
                credit = self.service_credit[mid] + c_eff * dt
                ls = self.links[m.in_link]
                out_ls = self.links[m.out_link]
                out_cap = out_ls.link.capacity
                while credit >= 1.0:
                    if out_ls.count() >= out_cap:
                        break
                    v = self._pop_queued(ls, m.out_link)
                    if v is None:
                        break
                    credit -= 1.0
                    self.departures[mid] += 1
                    if v.vclass == TRANSIT:
                        v.route_idx += 1
                    self.on_network -= 1  # re-incremented on downstream entry
                    self._enter_link(v, m.out_link)
                self.service_credit[mid] = min(credit, 1.0)

    def _pop_queued(self, ls: LinkState, out_link: str):
        """First queued vehicle of the movement; buses stop at stations first."""
        queue = ls.queue
        for i, v in enumerate(queue):
            if v.out_link != out_link:
                continue
            if v.vclass == TRANSIT:
                stop = self._next_stop_on_link(v)
                if stop is not None:
                    # The bus must serve its station before crossing the line.
                    del queue[i]
                    v.x = stop[1]
                    v.state = DWELLING
                    v.remaining_dwell = _DWELL_PENDING
                    v.next_stop_idx = stop[0]
                    ls.dwelling.append(v)
                    ls.refresh_queue_positions()
                    return self._pop_queued(ls, out_link)
            del queue[i]
            if i == 0:
                # Cheap path: remaining slots shift by one spacing.
                sp = ls.link.jam_spacing
                for w in queue:
                    w.x += sp
            else:
                ls.refresh_queue_positions()
            return v
        return None

    def _accrue_delay(self, dt):
        for ls in self.links.values():
            for v in ls.queue:
                v.delay += dt
                if v.vclass == TRANSIT:
                    self.delay_transit += dt
                    self.passenger_delay += v.occupancy * dt
                elif v.is_cv:
                    self.delay_cv += dt
                else:
                    self.delay_nv += dt
        for src in self.sources.values():
            n = len(src.backlog)
            if n == 0:
                continue
            nt = src.n_transit
            self.delay_cv += src.n_cv_car * dt
            self.delay_nv += (n - nt - src.n_cv_car) * dt
            if nt:
                self.delay_transit += nt * dt
                self.passenger_delay += src.pax_waiting * dt


def transit_update(world: World, dt: float) -> World:
    """Dwell bookkeeping: passenger accumulation, arrivals, countdowns."""
    cfg = world.scenario.transit
    for ls_state in world.lines:
        line = ls_state.line
        if line.od_rates:
            w = ls_state.waiting
            for a, b, rate in line.od_rates:
                w[a][b] += rate * dt
    for link_state in world.links.values():
        if not link_state.dwelling:
            continue
        done = []
        for v in link_state.dwelling:
            if v.remaining_dwell == _DWELL_PENDING:
                _begin_dwell(world, v, cfg)
            else:
                v.remaining_dwell -= dt
            if v.remaining_dwell <= 0:
                done.append(v)
        if done:
            for v in done:
                link_state.dwelling.remove(v)
                v.state = MOVING
                v.next_stop_idx += 1
                link_state.moving.append(v)
    return world


def _begin_dwell(world: World, v: Vehicle, cfg):
    ls = world.lines[v.line]
    si = v.next_stop_idx
    alighting = int(v.onboard.pop(si, 0))
    boarding = 0
    room = cfg.capacity - (v.occupancy - alighting)
    waiting_row = ls.waiting[si]
    for dest in range(len(waiting_row)):
        take = int(waiting_row[dest])
        if take <= 0:
            continue
        take = min(take, room - boarding)
        if take <= 0:
            break
        waiting_row[dest] -= take
        v.onboard[dest] = v.onboard.get(dest, 0) + take
        boarding += take
    v.occupancy = v.occupancy + boarding - alighting
    ls.boarded += boarding
    v.remaining_dwell = cfg.dwell_base + cfg.dwell_per_pax * (boarding + alighting)


def necessary_condition_monitor(world: World) -> list[tuple[str, int, float]]:
    """Phases whose movements all have zero CVs and a jam-full incoming link.

    Each record is (node, phase index, time). A nonempty result means the
    CV-observation condition required for stabilizability is violated.
    """
    cv_per_movement: dict[str, int] = {m: 0 for m in world.net.movements}
    for ls in world.links.values():
        for v in ls.vehicles():
            if v.is_cv and v.out_link is not None:
                mid = f"{v.link}>{v.out_link}"
                if mid in cv_per_movement:
                    cv_per_movement[mid] += 1
    violations = []
    for nid, node in world.net.nodes.items():
        for phase in node.phases:
            hit = True
            for mid in phase.movements:
                m = world.net.movements[mid]
                ls = world.links[m.in_link]
                if cv_per_movement[mid] > 0 or ls.count() < ls.link.capacity:
                    hit = False
                    break
            if hit:
                violations.append((nid, phase.index, world.t))
    return violations

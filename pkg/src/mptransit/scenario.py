"""Scenario loading and validation.

A scenario is a single YAML document holding the network, demand profiles,
transit lines, controller block and simulation block. Field units follow
road-engineering convention (km/h, veh/km, veh/h, persons/h); everything is
converted to SI on load.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import yaml

from .network import (
    ConfigurationError,
    Link,
    Movement,
    Network,
    Phase,
    SegmentationStrategy,
    SignalNode,
)

CONTROLLER_VARIANTS = ("cv-mp", "transit-mp", "mtransit-mp", "occ-mp", "eocc-mp")


class ScenarioError(ConfigurationError):
    """Scenario file failed to parse or validate."""


@dataclass
class DemandEntry:
    """Piecewise-constant car demand loaded at one entry link."""

    entry_link: str
    profile: list[tuple[float, float]]   # (t_start s, rate veh/s), sorted

    def rate_at(self, t: float) -> float:
        rate = 0.0
        for t0, r in self.profile:
            if t >= t0:
                rate = r
            else:
                break
        return rate


@dataclass
class TransitStop:
    link: str
    position: float   # m from link inlet


@dataclass
class TransitLine:
    id: str
    route: list[str]                   # link sequence
    headway: float                     # s
    first_departure: float = 0.0       # s
    stops: list[TransitStop] = field(default_factory=list)
    # (from_stop_idx, to_stop_idx, persons/s)
    od_rates: list[tuple[int, int, float]] = field(default_factory=list)
    # Passengers already aboard at dispatch (boarded outside the modeled
    # network); they alight at the line's first stop.
    initial_occupancy: int = 0


@dataclass
class TransitConfig:
    lines: list[TransitLine] = field(default_factory=list)
    dwell_base: float = 10.0           # s
    dwell_per_pax: float = 2.0         # s per boarding/alighting passenger
    capacity: int = 60                 # persons incl. driver


@dataclass
class ControllerConfig:
    variant: str = "transit-mp"
    decision_step: float = 10.0        # s, T0
    yellow: float = 3.0                # s, Ty
    startup_lost: float = 1.0          # s, Tl
    beta_mode: str = "position"        # "position" | "eta"
    eta_buffer: float = 2.0            # s, acceleration compensation buffer
    segmentation: SegmentationStrategy = field(default_factory=SegmentationStrategy)
    penetration: float = 1.0
    penetration_per_link: dict[str, float] = field(default_factory=dict)
    car_occupancy: int = 1
    stats_path: str | None = None      # historical stats (mtransit-mp)
    # Apply the forced-zero saturation rule to the historical fallback term.
    clamp_fallback: bool = True
    # Queue correction feeding the expected-queue recursion. "true_queue"
    # plugs in the observed stopline queue (the ideal case; pair with the
    # error model for realistic estimates). "cv_expansion" scales the stopped
    # CV count by 1/psi; unbiased but so noisy at low penetration that the
    # quadratic delay term amplifies it into over-service.
    anchor: str = "true_queue"         # "true_queue" | "cv_expansion" | "none"

    def pi_for(self, link_id: str) -> float:
        return self.penetration_per_link.get(link_id, self.penetration)

    @property
    def lost_time_factor(self) -> float:
        return (self.decision_step - self.yellow - self.startup_lost) / self.decision_step


@dataclass
class SimConfig:
    dt: float = 1.0
    horizon: float = 3600.0
    warmup: float = 600.0
    demand_mode: str = "poisson"       # "poisson" | "deterministic"


@dataclass
class Scenario:
    name: str
    network: Network
    demand: list[DemandEntry]
    transit: TransitConfig
    controller: ControllerConfig
    sim: SimConfig
    path: str | None = None

    def with_overrides(self, **kwargs) -> "Scenario":
        """Copy with controller/sim fields replaced (used by the harness)."""
        ctrl_fields = {k: v for k, v in kwargs.items()
                       if hasattr(self.controller, k) and v is not None}
        sim_fields = {k: v for k, v in kwargs.items()
                      if hasattr(SimConfig, k) and v is not None}
        ctrl = replace(self.controller, **ctrl_fields) if ctrl_fields else self.controller
        sim = replace(self.sim, **sim_fields) if sim_fields else self.sim
        return replace(self, controller=ctrl, sim=sim)

    def scale_demand(self, factor: float) -> "Scenario":
        scaled = [DemandEntry(d.entry_link, [(t, r * factor) for t, r in d.profile])
                  for d in self.demand]
        return replace(self, demand=scaled)


def _req(mapping, key, ctx):
    if key not in mapping:
        raise ScenarioError(f"{ctx}: missing required field '{key}'")
    return mapping[key]


def _parse_network(doc) -> Network:
    links = []
    for raw in _req(doc, "links", "scenario"):
        ctx = f"link {raw.get('id', '?')}"
        links.append(Link(
            id=str(_req(raw, "id", ctx)),
            length=float(_req(raw, "length_m", ctx)),
            jam_density=float(raw.get("jam_density_veh_km", 140.0)) / 1000.0,
            free_flow_speed=float(raw.get("speed_kmh", 50.0)) / 3.6,
            lanes=int(raw.get("lanes", 1)),
            station_positions=tuple(float(s) for s in raw.get("stations_m", [])),
            from_node=raw.get("from"),
            to_node=raw.get("to"),
        ))
    movements = []
    for raw in _req(doc, "movements", "scenario"):
        ctx = f"movement {raw.get('in', '?')}>{raw.get('out', '?')}"
        in_link = str(_req(raw, "in", ctx))
        node = None
        for l in links:
            if l.id == in_link:
                node = l.to_node
        movements.append(Movement(
            in_link=in_link,
            out_link=str(_req(raw, "out", ctx)),
            node=node or "?",
            sat_flow=float(_req(raw, "sat_flow_vph", ctx)) / 3600.0,
            turn_ratio=float(raw.get("turn_ratio", 1.0)),
        ))
    nodes = []
    for raw in _req(doc, "nodes", "scenario"):
        nid = str(_req(raw, "id", f"node {raw.get('id', '?')}"))
        node = SignalNode(id=nid)
        for idx, mids in enumerate(_req(raw, "phases", f"node {nid}")):
            node.phases.append(Phase(node=nid, index=idx,
                                     movements=tuple(str(m) for m in mids)))
        nodes.append(node)
    source_rates = {}
    for raw in doc.get("sources", []):
        source_rates[str(_req(raw, "link", "sources"))] = \
            float(_req(raw, "rate_vph", "sources")) / 3600.0
    return Network(links, movements, nodes, source_rates)


def _parse_demand(doc) -> list[DemandEntry]:
    out = []
    for raw in doc.get("demand", []):
        ctx = f"demand at {raw.get('entry', '?')}"
        profile = [(float(t), float(vph) / 3600.0)
                   for t, vph in _req(raw, "profile_vph", ctx)]
        profile.sort(key=lambda p: p[0])
        out.append(DemandEntry(entry_link=str(_req(raw, "entry", ctx)), profile=profile))
    return out


def _parse_transit(doc) -> TransitConfig:
    raw = doc.get("transit") or {}
    cfg = TransitConfig(
        dwell_base=float(raw.get("dwell_base_s", 10.0)),
        dwell_per_pax=float(raw.get("dwell_per_pax_s", 2.0)),
        capacity=int(raw.get("capacity", 60)),
    )
    for lraw in raw.get("lines", []):
        ctx = f"transit line {lraw.get('id', '?')}"
        stops = [TransitStop(link=str(_req(s, "link", ctx)), position=float(_req(s, "pos_m", ctx)))
                 for s in lraw.get("stops", [])]
        od = [(int(a), int(b), float(pph) / 3600.0)
              for a, b, pph in lraw.get("od_rates_pph", [])]
        cfg.lines.append(TransitLine(
            id=str(_req(lraw, "id", ctx)),
            route=[str(l) for l in _req(lraw, "route", ctx)],
            headway=float(_req(lraw, "headway_s", ctx)),
            first_departure=float(lraw.get("first_departure_s", 0.0)),
            stops=stops,
            od_rates=od,
            initial_occupancy=int(lraw.get("initial_occupancy", 0)),
        ))
    return cfg


def _parse_controller(doc) -> ControllerConfig:
    raw = doc.get("controller") or {}
    pen = raw.get("penetration", 1.0)
    per_link = {}
    if isinstance(pen, dict):
        per_link = {str(k): float(v) for k, v in (pen.get("per_link") or {}).items()}
        pen = float(pen.get("default", 1.0))
    return ControllerConfig(
        variant=str(raw.get("variant", "transit-mp")).lower(),
        decision_step=float(raw.get("decision_step_s", 10.0)),
        yellow=float(raw.get("yellow_s", 3.0)),
        startup_lost=float(raw.get("startup_lost_s", 1.0)),
        beta_mode=str(raw.get("beta_mode", "position")),
        eta_buffer=float(raw.get("eta_buffer_s", 2.0)),
        segmentation=SegmentationStrategy.parse(raw.get("segmentation", "S0")),
        penetration=float(pen),
        penetration_per_link=per_link,
        car_occupancy=int(raw.get("car_occupancy", 1)),
        stats_path=raw.get("historical_stats"),
        clamp_fallback=bool(raw.get("clamp_fallback", True)),
        anchor=str(raw.get("anchor", "true_queue")),
    )


def _parse_sim(doc) -> SimConfig:
    raw = doc.get("sim") or {}
    return SimConfig(
        dt=float(raw.get("dt_s", 1.0)),
        horizon=float(raw.get("horizon_s", 3600.0)),
        warmup=float(raw.get("warmup_s", 600.0)),
        demand_mode=str(raw.get("demand_mode", "poisson")),
    )


def load_scenario(path: str) -> Scenario:
    """Parse and validate a scenario file; raises ScenarioError on failure."""
    if not os.path.exists(path):
        raise ScenarioError(f"scenario file not found: {path}")
    with open(path) as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ScenarioError(f"parse error in {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ScenarioError(f"{path}: top level must be a mapping")
    scenario = Scenario(
        name=str(doc.get("name", os.path.basename(path))),
        network=_parse_network(doc),
        demand=_parse_demand(doc),
        transit=_parse_transit(doc),
        controller=_parse_controller(doc),
        sim=_parse_sim(doc),
        path=path,
    )
    violations = validate_network(scenario)
    if violations:
        raise ScenarioError(
            f"{path}: {len(violations)} validation error(s):\n  " + "\n  ".join(violations))
    return scenario


def validate_network(scenario: Scenario) -> list[str]:
    """All invariant violations of a scenario; empty list means valid."""
    net = scenario.network
    out = net.validate()
    if not net.nodes:
        out.append("network: needs at least one signalized node")
    if not net.movements:
        out.append("network: needs at least one movement")
    for d in scenario.demand:
        if d.entry_link not in net.links:
            out.append(f"demand: unknown entry link {d.entry_link}")
        elif net.links[d.entry_link].from_node is not None:
            out.append(f"demand: link {d.entry_link} is not an entry link")
        if any(r < 0 for _, r in d.profile):
            out.append(f"demand at {d.entry_link}: negative rate")
        if not d.profile:
            out.append(f"demand at {d.entry_link}: empty profile")
    for line in scenario.transit.lines:
        if line.headway <= 0:
            out.append(f"line {line.id}: headway must be > 0")
        for l in line.route:
            if l not in net.links:
                out.append(f"line {line.id}: unknown route link {l}")
        for a, b in zip(line.route, line.route[1:]):
            if a in net.links and b in net.links and f"{a}>{b}" not in net.movements:
                out.append(f"line {line.id}: no movement {a}>{b} on route")
        if line.route and line.route[0] in net.links \
                and net.links[line.route[0]].from_node is not None:
            out.append(f"line {line.id}: route must start at an entry link")
        route_set = set(line.route)
        for s in line.stops:
            if s.link not in route_set:
                out.append(f"line {line.id}: stop on link {s.link} not on route")
            if s.link in net.links:
                if not (0 <= s.position <= net.links[s.link].length):
                    out.append(f"line {line.id}: stop at {s.position} m outside link {s.link}")
                if s.position not in net.links[s.link].station_positions:
                    out.append(f"line {line.id}: stop at {s.link}:{s.position} m "
                               "has no matching station on the link")
        n_stops = len(line.stops)
        for a, b, r in line.od_rates:
            if not (0 <= a < n_stops and 0 <= b < n_stops and a != b):
                out.append(f"line {line.id}: od pair ({a},{b}) out of range")
            if r < 0:
                out.append(f"line {line.id}: negative od rate")
    ctrl = scenario.controller
    if ctrl.variant not in CONTROLLER_VARIANTS:
        out.append(f"controller: unknown variant {ctrl.variant!r}")
    if not ctrl.decision_step > ctrl.yellow + ctrl.startup_lost:
        out.append("controller: requires decision_step > yellow + startup_lost")
    if ctrl.yellow < 0 or ctrl.startup_lost < 0:
        out.append("controller: yellow and startup_lost must be >= 0")
    for lid, pi in [("default", ctrl.penetration)] + list(ctrl.penetration_per_link.items()):
        if not (0.0 <= pi <= 1.0):
            out.append(f"controller: penetration {pi} for {lid} outside [0,1]")
    if ctrl.beta_mode not in ("position", "eta"):
        out.append(f"controller: unknown beta_mode {ctrl.beta_mode!r}")
    if ctrl.anchor not in ("cv_expansion", "true_queue", "none"):
        out.append(f"controller: unknown anchor mode {ctrl.anchor!r}")
    if ctrl.car_occupancy < 1:
        out.append("controller: car_occupancy must be >= 1")
    if scenario.sim.dt <= 0:
        out.append("sim: dt must be > 0")
    if scenario.sim.horizon <= scenario.sim.warmup:
        out.append("sim: horizon must exceed warmup")
    if scenario.sim.demand_mode not in ("poisson", "deterministic"):
        out.append(f"sim: unknown demand_mode {scenario.sim.demand_mode!r}")
    if scenario.controller.decision_step % scenario.sim.dt != 0:
        out.append("controller: decision_step must be a multiple of sim dt")
    return out

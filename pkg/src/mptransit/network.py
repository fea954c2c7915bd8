"""Road-network graph: links, movements, phases and link segmentation windows.

All internal quantities are SI: meters, seconds, veh/s, veh/m. Scenario files
use the field units documented in the schema (km/h, veh/km, veh/h) and are
converted on load.
"""

from __future__ import annotations

from dataclasses import dataclass, field


class ConfigurationError(ValueError):
    """Raised for invalid scenario / controller configuration."""


# Fixed segmentation window lengths in meters, keyed by strategy tag.
# S0 disables segmentation (window covers the whole link).
SEGMENT_LENGTHS = {
    "S0": None,
    "S1": 90.0,
    "S2": 140.0,
    "S3": 280.0,
    "S4": 420.0,
    "S5": 560.0,
}


@dataclass(frozen=True)
class SegmentationStrategy:
    """Window policy selecting which vehicles enter the pressure calculation.

    Either one of the fixed tags S0..S5 or a custom window length in meters.
    """

    tag: str = "S0"
    custom_length: float | None = None

    @property
    def length(self) -> float | None:
        if self.custom_length is not None:
            return self.custom_length
        return SEGMENT_LENGTHS[self.tag]

    @classmethod
    def parse(cls, value) -> "SegmentationStrategy":
        if isinstance(value, SegmentationStrategy):
            return value
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            if value <= 0:
                raise ConfigurationError(
                    f"custom segmentation length must be > 0, got {value}")
            return cls(tag="custom", custom_length=float(value))
        tag = str(value).strip().upper()
        if tag not in SEGMENT_LENGTHS:
            raise ConfigurationError(
                f"unknown segmentation tag {value!r} (expected S0..S5 or a length in m)")
        return cls(tag=tag)


def segment_vehicle_window(link: "Link", strategy: SegmentationStrategy) -> tuple[float, float]:
    """Active position window [x_lo, L] nearest the stopline for `link`.

    Vehicles with x >= x_lo are visible to the pressure calculation. The
    window is measured back from the stopline and clamped to the link.
    """
    seg = strategy.length
    if seg is None:
        return (0.0, link.length)
    return (max(0.0, link.length - seg), link.length)


@dataclass
class Link:
    """A directed road link. Fictitious source links have no physical length."""

    id: str
    length: float = 0.0               # m; 0 for fictitious
    jam_density: float = 0.14         # veh/m per lane; ignored for fictitious
    free_flow_speed: float = 13.89    # m/s
    lanes: int = 1
    station_positions: tuple[float, ...] = ()   # m from inlet
    is_fictitious: bool = False
    from_node: str | None = None      # None: network boundary (entry)
    to_node: str | None = None        # None: network boundary (exit)

    @property
    def capacity(self) -> int:
        """Jam vehicle capacity; unbounded for fictitious links."""
        if self.is_fictitious:
            return 1 << 62
        return int(self.jam_density * self.length * self.lanes)

    @property
    def jam_spacing(self) -> float:
        """Meters of link pipe consumed per stored vehicle."""
        return self.length / max(1, self.capacity)

    @property
    def fftt(self) -> float:
        """Free-flow traversal time in seconds."""
        return self.length / self.free_flow_speed

    @property
    def last_station(self) -> float | None:
        """Position of the station nearest the stopline, None if no station."""
        if not self.station_positions:
            return None
        return max(self.station_positions)


@dataclass
class Movement:
    """An (incoming link, outgoing link) pair at a signalized node."""

    in_link: str
    out_link: str
    node: str
    sat_flow: float        # veh/s at the stopline
    turn_ratio: float      # share of in_link flow taking this movement

    @property
    def id(self) -> str:
        return f"{self.in_link}>{self.out_link}"


@dataclass
class Phase:
    """A set of movements served simultaneously at one node."""

    node: str
    index: int
    movements: tuple[str, ...]   # movement ids


@dataclass
class SignalNode:
    id: str
    phases: list[Phase] = field(default_factory=list)


class Network:
    """Immutable-after-load network graph shared read-only across runs."""

    def __init__(self, links, movements, nodes, source_rates=None):
        self.links: dict[str, Link] = {l.id: l for l in links}
        self.movements: dict[str, Movement] = {m.id: m for m in movements}
        self.nodes: dict[str, SignalNode] = {n.id: n for n in nodes}
        # Max loading rate of the point queue feeding each entry link (veh/s).
        self.source_rates: dict[str, float] = dict(source_rates or {})
        self._from_link: dict[str, list[Movement]] = {}
        self._at_node: dict[str, list[Movement]] = {n.id: [] for n in nodes}
        for m in movements:
            self._from_link.setdefault(m.in_link, []).append(m)
            if m.node in self._at_node:
                self._at_node[m.node].append(m)

    def movements_from(self, link_id: str) -> list[Movement]:
        return self._from_link.get(link_id, [])

    def movements_at(self, node_id: str) -> list[Movement]:
        return self._at_node.get(node_id, [])

    def entry_links(self) -> list[Link]:
        return [l for l in self.links.values()
                if l.from_node is None and not l.is_fictitious]

    def exit_links(self) -> list[Link]:
        return [l for l in self.links.values()
                if l.to_node is None and not l.is_fictitious]

    def ett(self, movement: Movement) -> float:
        """Expected free-flow travel time of the movement's incoming link."""
        return self.links[movement.in_link].fftt

    def source_movement_id(self, entry_link: str) -> str:
        return f"source>{entry_link}"

    def source_rate(self, entry_link: str) -> float:
        link = self.links[entry_link]
        return self.source_rates.get(entry_link, 0.5 * link.lanes)

    def validate(self) -> list[str]:
        """Referential / numeric integrity violations of the graph itself."""
        out: list[str] = []
        for l in self.links.values():
            if l.is_fictitious:
                continue
            if l.length <= 0:
                out.append(f"link {l.id}: length must be > 0 (got {l.length})")
            if l.jam_density <= 0:
                out.append(f"link {l.id}: jam density must be > 0")
            if l.free_flow_speed <= 0:
                out.append(f"link {l.id}: free flow speed must be > 0")
            if l.lanes < 1:
                out.append(f"link {l.id}: lanes must be >= 1")
            for s in l.station_positions:
                if not (0 <= s <= l.length):
                    out.append(f"link {l.id}: station at {s} m outside [0, {l.length}]")
        for m in self.movements.values():
            if m.in_link not in self.links:
                out.append(f"movement {m.id}: missing incoming link {m.in_link}")
            if m.out_link not in self.links:
                out.append(f"movement {m.id}: missing outgoing link {m.out_link}")
            if m.sat_flow <= 0:
                out.append(f"movement {m.id}: saturation flow must be > 0")
            if not (0 <= m.turn_ratio <= 1):
                out.append(f"movement {m.id}: turning ratio {m.turn_ratio} outside [0,1]")
            if m.node not in self.nodes:
                out.append(f"movement {m.id}: unknown node {m.node}")
            elif m.in_link in self.links and self.links[m.in_link].to_node != m.node:
                out.append(f"movement {m.id}: incoming link does not end at node {m.node}")
            if m.out_link in self.links and m.node in self.nodes:
                if self.links[m.out_link].from_node != m.node:
                    out.append(f"movement {m.id}: outgoing link does not start at node {m.node}")
        for link_id, ms in self._from_link.items():
            total = sum(m.turn_ratio for m in ms)
            if total > 1.0 + 1e-9:
                out.append(f"link {link_id}: turning ratios sum to {total:.4g} > 1")
        phase_movements: set[str] = set()
        for n in self.nodes.values():
            if not n.phases:
                out.append(f"node {n.id}: has no phase")
            for p in n.phases:
                if not p.movements:
                    out.append(f"node {n.id} phase {p.index}: empty movement set")
                for mid in p.movements:
                    if mid not in self.movements:
                        out.append(f"node {n.id} phase {p.index}: unknown movement {mid}")
                    elif self.movements[mid].node != n.id:
                        out.append(f"node {n.id} phase {p.index}: movement {mid} "
                                   f"belongs to node {self.movements[mid].node}")
                    phase_movements.add(mid)
        for m in self.movements.values():
            if m.id not in phase_movements:
                out.append(f"movement {m.id}: not a member of any phase at node {m.node}")
        return out

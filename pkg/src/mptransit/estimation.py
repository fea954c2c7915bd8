"""Historical-data machinery: penetration estimate, expected-queue recursion,
triangle-delay travel time and the parameter-error injection model.

These feed the historical fallback of the modified transit controller when a
movement has no connected-vehicle observation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

from .network import ConfigurationError

PSI_FLOOR = 0.01          # keeps the fallback live when no CV was ever seen
LAMBDA_FLOOR_VEH = 0.5    # per time-of-day window, for movements with no arrivals
DEFAULT_T_TOD = 1800.0    # s


def estimate_penetration(historical_cv_count: float, lam: float, t_tod: float,
                         floor: float = PSI_FLOOR) -> float:
    """Penetration estimate: historical CV count over expected arrivals.

    Clamped to (0, 1]; a zero count returns the floor so that downstream
    scaling never divides by zero.
    """
    denom = lam * t_tod
    if denom <= 0:
        raise ConfigurationError(
            f"penetration estimate needs lambda*t_tod > 0, got {lam} * {t_tod}")
    return min(1.0, max(historical_cv_count / denom, floor))


def iqa_step(eq: float, s_prev: int, lam: float, lam_depart: float, t0: float,
             cv_anchor: float | None = None) -> float:
    """One decision-step update of the expected stopline queue.

    `s_prev` is the signal state over the previous decision interval. When a
    CV-based queue estimate is available it replaces the carried value,
    correcting accumulated rate errors.
    """
    base = eq if cv_anchor is None else cv_anchor
    return max(0.0, base + lam * t0 - s_prev * lam_depart * t0)


def tau_hat(eq: float, psi: float, lam: float, ett: float) -> float:
    """Normalized movement travel-time estimate from the expected queue.

    Sum of the queued-vehicle count term and the accumulated-delay triangle
    term, both scaled by the penetration estimate so the value is comparable
    with CV-only pressures elsewhere on the network.
    """
    return psi * eq + psi * eq * eq / (2.0 * lam * ett)


def stopped_cv_expansion(n_stopped_cvs: int, psi: float) -> float:
    """Full-population queue estimate from the stopped-CV count.

    Each queued vehicle is a CV with probability psi, so the count scaled by
    1/psi is unbiased for the whole queue.
    """
    if n_stopped_cvs <= 0:
        return 0.0
    return n_stopped_cvs / max(psi, PSI_FLOOR)


@dataclass
class ErrorModel:
    """Systematic parameter error with uniform jitter around the level.

    The realized multiplier for each queried value is 1 + u with
    u ~ Uniform[level - jitter, level + jitter]. Targets are the arrival-rate
    estimate and the CV queue correction.
    """

    level: float = 0.0
    jitter: float = 0.05

    def __post_init__(self):
        if not (-0.5 - 1e-9 <= self.level <= 0.5 + 1e-9):
            raise ConfigurationError(f"error level {self.level} outside [-0.5, 0.5]")

    def inject(self, value: float, rng) -> float:
        u = rng.uniform(self.level - self.jitter, self.level + self.jitter)
        return value * (1.0 + u)


def inject_error(value: float, model: ErrorModel, rng) -> float:
    return model.inject(value, rng)


@dataclass
class MovementStats:
    """Per time-of-day-window historical statistics of one movement."""

    windows: list[float] = field(default_factory=list)      # window start times
    lam: list[float] = field(default_factory=list)           # veh/s
    psi: list[float] = field(default_factory=list)
    p_hat: list[float] = field(default_factory=list)         # persons
    lam_depart: list[float] = field(default_factory=list)    # veh/s

    def index_at(self, t: float) -> int:
        idx = 0
        for i, w in enumerate(self.windows):
            if t >= w:
                idx = i
        return idx


class HistoricalStats:
    """Per-movement arrival rate, penetration, occupancy and departure rate."""

    def __init__(self, t_tod: float = DEFAULT_T_TOD):
        self.t_tod = t_tod
        self.by_movement: dict[str, MovementStats] = {}

    def add_window(self, movement_id: str, window_start: float, lam: float,
                   psi: float, p_hat: float, lam_depart: float):
        ms = self.by_movement.setdefault(movement_id, MovementStats())
        ms.windows.append(window_start)
        ms.lam.append(lam)
        ms.psi.append(psi)
        ms.p_hat.append(p_hat)
        ms.lam_depart.append(lam_depart)

    def lookup(self, movement_id: str, t: float) -> tuple[float, float, float, float]:
        """(lam, psi, p_hat, lam_depart) for movement at time t."""
        ms = self.by_movement.get(movement_id)
        if ms is None or not ms.windows:
            raise ConfigurationError(f"no historical stats for movement {movement_id}")
        i = ms.index_at(t)
        return ms.lam[i], ms.psi[i], ms.p_hat[i], ms.lam_depart[i]

    def covers(self, movement_ids) -> list[str]:
        return [m for m in movement_ids if m not in self.by_movement]

    def to_csv(self, path: str):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["movement", "window_start_s", "lambda_vph", "psi",
                        "p_mean", "depart_vph"])
            for mid in sorted(self.by_movement):
                ms = self.by_movement[mid]
                for i, t0 in enumerate(ms.windows):
                    w.writerow([mid, repr(t0), repr(ms.lam[i] * 3600.0),
                                repr(ms.psi[i]), repr(ms.p_hat[i]),
                                repr(ms.lam_depart[i] * 3600.0)])

    @classmethod
    def from_csv(cls, path: str, t_tod: float = DEFAULT_T_TOD) -> "HistoricalStats":
        stats = cls(t_tod=t_tod)
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                stats.add_window(
                    row["movement"], float(row["window_start_s"]),
                    float(row["lambda_vph"]) / 3600.0, float(row["psi"]),
                    float(row["p_mean"]), float(row["depart_vph"]) / 3600.0)
        return stats

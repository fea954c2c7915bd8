"""Batch experiment runner: single runs, sweeps, seed repetition, calibration.

A run is fully determined by (scenario, descriptor, seed); artifacts are a
metrics CSV per seed plus a JSON summary. Sweep tables are recomputable pure
functions of the per-run summaries.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

from .analysis import (
    MetricsFrame,
    detect_starvation,
    lyapunov_value,
    metrics_frame,
    regression_slope,
    stability_verdict,
)
from .controllers import MaxPressureController
from .estimation import (
    DEFAULT_T_TOD,
    LAMBDA_FLOOR_VEH,
    ErrorModel,
    HistoricalStats,
    estimate_penetration,
)
from .network import ConfigurationError
from .scenario import Scenario, load_scenario
from .simulation import TRANSIT, World, necessary_condition_monitor

ENV_OUT_DIR = "MPTRANSIT_OUT"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


@dataclass
class RunDescriptor:
    scenario_path: str
    controller: str | None = None          # None: scenario default
    penetration: float | None = None
    segmentation: str | float | None = None
    error_level: float | None = None
    seeds: tuple[int, ...] = (1,)
    horizon: float | None = None
    warmup: float | None = None
    out_dir: str | None = None
    stats_path: str | None = None
    demand_scale: float | None = None
    snapshots: bool = False
    workers: int = 1
    name: str | None = None

    def __post_init__(self):
        if not self.seeds:
            raise ConfigurationError("seeds must be nonempty")


@dataclass
class SweepDescriptor:
    base: RunDescriptor
    axis: str                              # penetration | segmentation | error_level | controller
    values: tuple = ()
    controllers: tuple[str, ...] = ()      # optional cross product

    AXES = ("penetration", "segmentation", "error_level", "controller")

    def __post_init__(self):
        if self.axis not in self.AXES:
            raise ConfigurationError(f"unknown sweep axis {self.axis!r}")
        if not self.values:
            raise ConfigurationError("sweep values must be nonempty")


@dataclass
class RunResult:
    seed: int
    times: list[float]
    frames: list[MetricsFrame]
    signal_history: dict[str, list[int]]
    queue_history: dict[str, list[int]]
    decisions: list[dict[str, int]]
    pressure_violations: list[tuple[float, str, str]] = field(default_factory=list)
    necessary_violations: list[tuple[str, int, float]] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    snapshots: list[tuple] = field(default_factory=list)


def prepare_scenario(descriptor: RunDescriptor) -> Scenario:
    scenario = load_scenario(descriptor.scenario_path)
    scenario = scenario.with_overrides(
        variant=descriptor.controller,
        penetration=descriptor.penetration,
        segmentation=(None if descriptor.segmentation is None
                      else _parse_seg(descriptor.segmentation)),
        stats_path=descriptor.stats_path,
        horizon=descriptor.horizon,
        warmup=descriptor.warmup,
    )
    if descriptor.demand_scale is not None:
        scenario = scenario.scale_demand(descriptor.demand_scale)
    return scenario


def _parse_seg(value):
    from .network import SegmentationStrategy
    return SegmentationStrategy.parse(value)


def load_stats_for(scenario: Scenario) -> HistoricalStats | None:
    path = scenario.controller.stats_path
    if path is None:
        return None
    base = os.path.dirname(scenario.path or ".")
    full = path if os.path.isabs(path) else os.path.join(base, path)
    if not os.path.exists(full):
        raise ConfigurationError(f"historical stats file not found: {full}")
    return HistoricalStats.from_csv(full)


def simulate_run(scenario: Scenario, seed: int,
                 stats: HistoricalStats | None = None,
                 error_model: ErrorModel | None = None,
                 collect_snapshots: bool = False,
                 with_lyapunov: bool = True,
                 arrival_log=None,
                 decision_hook=None) -> RunResult:
    """One deterministic run; returns all decision-step records in memory."""
    if stats is None:
        stats = load_stats_for(scenario)
    if error_model is None and scenario.controller.variant == "mtransit-mp":
        pass  # error injection only when explicitly requested
    world = World(scenario, seed)
    if arrival_log is not None:
        world.arrival_log = arrival_log
    controller = MaxPressureController(scenario.network, scenario.controller,
                                       stats=stats, error_model=error_model)
    dt = scenario.sim.dt
    t0 = scenario.controller.decision_step
    substeps = int(round(t0 / dt))
    n_steps = int(round(scenario.sim.horizon / dt))
    movements = list(scenario.network.movements)
    result = RunResult(
        seed=seed, times=[], frames=[],
        signal_history={m: [] for m in movements},
        queue_history={m: [] for m in movements},
        decisions=[])
    decision = dict(world.active_phase)
    warmup_marks = None

    for k in range(n_steps):
        if k % substeps == 0:
            frame = metrics_frame(world)
            if with_lyapunov:
                frame.lyapunov = lyapunov_value(world).value
            counts = world.movement_counts()
            decision, tables = controller.decide(world)
            result.times.append(world.t)
            result.frames.append(frame)
            result.decisions.append(dict(decision))
            for nid, table in tables.items():
                phase = scenario.network.nodes[nid].phases[decision[nid]]
                for mid in phase.movements:
                    w = table.weights[mid]
                    if w.pressure < -1e-9 or w.raw_pressure < -1e-9:
                        result.pressure_violations.append((world.t, nid, mid))
            result.necessary_violations.extend(necessary_condition_monitor(world))
            served = set()
            for nid, pidx in decision.items():
                served.update(scenario.network.nodes[nid].phases[pidx].movements)
            for mid in movements:
                result.signal_history[mid].append(1 if mid in served else 0)
                result.queue_history[mid].append(counts[mid][0])
            if collect_snapshots:
                for mid in movements:
                    result.snapshots.append(
                        (world.t, mid, counts[mid][0], counts[mid][1],
                         result.signal_history[mid][-1]))
            if decision_hook is not None:
                decision_hook(world, decision, tables)
        world.step(dt, decision)
        if warmup_marks is None and world.t >= scenario.sim.warmup:
            warmup_marks = _counter_snapshot(world)

    final = metrics_frame(world)
    if with_lyapunov:
        final.lyapunov = lyapunov_value(world).value
    result.times.append(world.t)
    result.frames.append(final)
    result.summary = _summarize(scenario, world, result, warmup_marks)
    return result


def _counter_snapshot(world):
    boarded = sum(ls.boarded for ls in world.lines) + world.initial_pax
    return dict(delay_cv=world.delay_cv, delay_nv=world.delay_nv,
                delay_transit=world.delay_transit,
                passenger_delay=world.passenger_delay,
                count_cv=world.count_cv, count_nv=world.count_nv,
                count_transit=world.count_transit, boarded=boarded,
                created=world.created)


def _summarize(scenario: Scenario, world: World, result: RunResult,
               warmup_marks) -> dict:
    if warmup_marks is None:
        warmup_marks = dict.fromkeys(
            ("delay_cv", "delay_nv", "delay_transit", "passenger_delay",
             "count_cv", "count_nv", "count_transit", "boarded", "created"), 0)
    end = _counter_snapshot(world)
    d = {k: end[k] - warmup_marks[k] for k in end}

    def mean(num, den):
        return num / den if den > 0 else 0.0

    total_delay = d["delay_cv"] + d["delay_nv"] + d["delay_transit"]
    total_count = d["count_cv"] + d["count_nv"] + d["count_transit"]
    pax_trips = d["count_transit"] + d["boarded"]
    window = (scenario.sim.warmup, scenario.sim.horizon)
    verdict, slope = stability_verdict(
        result.times, [f.unserved_count for f in result.frames], window=window)
    lyap_slope = regression_slope(
        [t for t in result.times if window[0] <= t <= window[1]],
        [f.lyapunov for t, f in zip(result.times, result.frames)
         if window[0] <= t <= window[1]])
    starved = detect_starvation(result.times, result.signal_history,
                                result.queue_history)
    return {
        "seed": result.seed,
        "controller": scenario.controller.variant,
        "penetration": scenario.controller.penetration,
        "segmentation": scenario.controller.segmentation.tag,
        "max_vehicle_count": max(f.vehicle_count for f in result.frames),
        "max_spillover": max(f.spillover_count for f in result.frames),
        "max_unserved": max(f.unserved_count for f in result.frames),
        "mean_delay": mean(total_delay, total_count),
        "mean_delay_cv": mean(d["delay_cv"], d["count_cv"]),
        "mean_delay_nv": mean(d["delay_nv"], d["count_nv"]),
        "mean_delay_transit": mean(d["delay_transit"], d["count_transit"]),
        "mean_passenger_delay": mean(d["passenger_delay"], pax_trips),
        "stability_verdict": verdict,
        "unserved_slope": slope,
        "lyapunov_slope": lyap_slope,
        "pressure_violations": len(result.pressure_violations),
        "necessary_violations": len(result.necessary_violations),
        "starved_movements": [m for m, _ in starved],
        "created": world.created,
        "exited": world.exited,
    }


def write_metrics_csv(path: str, result: RunResult):
    with open(path, "w") as fh:
        fh.write(MetricsFrame.CSV_HEADER + "\n")
        for frame in result.frames:
            fh.write(frame.csv_row() + "\n")


def write_snapshots_csv(path: str, result: RunResult):
    with open(path, "w") as fh:
        fh.write("t,movement,count,cv_count,signal\n")
        for row in result.snapshots:
            fh.write(",".join(str(x) for x in row) + "\n")


def default_out_dir(descriptor: RunDescriptor) -> str:
    if descriptor.out_dir:
        return descriptor.out_dir
    return os.environ.get(ENV_OUT_DIR, "out")


def run(descriptor: RunDescriptor) -> dict:
    """Execute all seeds of a descriptor; write artifacts; return the summary.

    Per-seed failures are isolated: a failing seed is recorded and the other
    seeds still complete.
    """
    scenario = prepare_scenario(descriptor)
    stats = load_stats_for(scenario)
    error_model = (None if descriptor.error_level is None
                   else ErrorModel(level=descriptor.error_level))
    out_root = default_out_dir(descriptor)
    name = descriptor.name or scenario.name
    run_dir = os.path.join(out_root, name)
    os.makedirs(run_dir, exist_ok=True)
    per_seed = []
    failures = []
    for seed in descriptor.seeds:
        try:
            result = simulate_run(scenario, seed, stats=stats,
                                  error_model=error_model,
                                  collect_snapshots=descriptor.snapshots)
        except Exception as exc:  # noqa: BLE001 - seed isolation by contract
            failures.append({"seed": seed, "error": f"{type(exc).__name__}: {exc}"})
            continue
        seed_dir = os.path.join(run_dir, f"seed_{seed}")
        os.makedirs(seed_dir, exist_ok=True)
        write_metrics_csv(os.path.join(seed_dir, "metrics.csv"), result)
        if descriptor.snapshots:
            write_snapshots_csv(os.path.join(seed_dir, "snapshots.csv"), result)
        per_seed.append(result.summary)
    summary = {
        "scenario": descriptor.scenario_path,
        "name": name,
        "controller": scenario.controller.variant,
        "penetration": scenario.controller.penetration,
        "segmentation": scenario.controller.segmentation.tag,
        "error_level": descriptor.error_level,
        "seeds": list(descriptor.seeds),
        "per_seed": per_seed,
        "failures": failures,
        "aggregate": aggregate_summaries(per_seed),
    }
    with open(os.path.join(run_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


_AGG_KEYS = ("max_vehicle_count", "max_spillover", "max_unserved", "mean_delay",
             "mean_delay_cv", "mean_delay_nv", "mean_delay_transit",
             "mean_passenger_delay", "unserved_slope")


def aggregate_summaries(per_seed: list[dict]) -> dict:
    if not per_seed:
        return {}
    out = {}
    for key in _AGG_KEYS:
        vals = [s[key] for s in per_seed]
        out[key] = sum(vals) / len(vals)
    verdicts = [s["stability_verdict"] for s in per_seed]
    out["stability_verdict"] = max(set(verdicts), key=verdicts.count)
    out["verdicts"] = verdicts
    return out


def sweep(descriptor: SweepDescriptor) -> list[dict]:
    """Run the cartesian product (axis values x controllers x seeds).

    Returns one aggregated row per (value, controller) group and writes a
    sweep.csv table; error-level sweeps also get an STD row per controller.
    """
    base = descriptor.base
    controllers = descriptor.controllers or (base.controller,)
    rows = []
    for value in descriptor.values:
        for ctrl in controllers:
            d = replace(base, controller=ctrl)
            if descriptor.axis == "penetration":
                d = replace(d, penetration=float(value))
            elif descriptor.axis == "segmentation":
                d = replace(d, segmentation=value)
            elif descriptor.axis == "error_level":
                d = replace(d, error_level=float(value))
            else:
                d = replace(d, controller=str(value))
                ctrl = str(value)
            d = replace(d, name=_group_name(descriptor.axis, value, ctrl,
                                            base.name or "sweep"))
            summary = run(d)
            row = {"axis": descriptor.axis, "value": value,
                   "controller": summary["controller"], **summary["aggregate"]}
            row["n_seeds"] = len(summary["per_seed"])
            rows.append(row)
    out_root = default_out_dir(base)
    os.makedirs(out_root, exist_ok=True)
    _write_sweep_csv(os.path.join(out_root, "sweep.csv"), descriptor, rows)
    return rows


def _group_name(axis, value, ctrl, base):
    return f"{base}_{axis}_{value}_{ctrl}"


def _write_sweep_csv(path: str, descriptor: SweepDescriptor, rows: list[dict]):
    cols = ["axis", "value", "controller", "n_seeds", *_AGG_KEYS, "stability_verdict"]
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(_fmt(row.get(c)) for c in cols))
    if descriptor.axis == "error_level":
        by_ctrl: dict[str, list[dict]] = {}
        for row in rows:
            by_ctrl.setdefault(row["controller"], []).append(row)
        for ctrl, group in by_ctrl.items():
            std_row = {"axis": "error_level", "value": "STD", "controller": ctrl,
                       "n_seeds": ""}
            for key in _AGG_KEYS:
                vals = [g[key] for g in group]
                mean = sum(vals) / len(vals)
                var = sum((v - mean) ** 2 for v in vals) / len(vals)
                std_row[key] = var ** 0.5
            lines.append(",".join(_fmt(std_row.get(c)) for c in cols))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def calibrate(scenario: Scenario, horizon: float | None = None,
              t_tod: float = DEFAULT_T_TOD, seed: int = 0) -> HistoricalStats:
    """Emit per-movement historical stats from a full-observation run.

    The calibration run observes every vehicle (flows stay healthy even where
    the deployment controller would be starved of data), while the historical
    CV sample is drawn at the scenario's configured deployment penetration so
    the emitted penetration estimates match the target environment.
    """
    import numpy as np

    variant = scenario.controller.variant
    if variant == "mtransit-mp":
        variant = "transit-mp"
    deploy = scenario.controller
    cal = scenario.with_overrides(variant=variant, horizon=horizon,
                                  penetration=1.0, penetration_per_link={})
    net = cal.network
    n_windows = max(1, int(round(cal.sim.horizon / t_tod)))
    arrivals = {m: [0] * n_windows for m in net.movements}
    cv_arrivals = {m: [0] * n_windows for m in net.movements}
    occupancy_sums = {m: [0.0] * n_windows for m in net.movements}
    green_time = {m: [0.0] * n_windows for m in net.movements}
    depart_marks = {m: 0 for m in net.movements}
    departures = {m: [0] * n_windows for m in net.movements}
    hcv_rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(5)[4])
    hcv_flags: dict[int, bool] = {}

    def log_arrival(world, v, link_id):
        if v.vid not in hcv_flags:
            # First sighting is the creation entry link; the historical CV
            # sample is drawn at the deployment penetration of that link.
            hcv_flags[v.vid] = (v.vclass == TRANSIT
                                or hcv_rng.random() < deploy.pi_for(link_id))
        if v.out_link is None:
            return
        mid = f"{link_id}>{v.out_link}"
        if mid not in arrivals:
            return
        w = min(n_windows - 1, int(world.t // t_tod))
        arrivals[mid][w] += 1
        if hcv_flags[v.vid]:
            cv_arrivals[mid][w] += 1
            occupancy_sums[mid][w] += v.occupancy

    t0 = cal.controller.decision_step
    prev_served: set[str] = set()

    def on_decision(world, decision, tables):
        nonlocal prev_served
        w = min(n_windows - 1, int(world.t // t_tod))
        for mid in net.movements:
            new = world.departures[mid]
            delta = new - depart_marks[mid]
            depart_marks[mid] = new
            # Busy green only: intervals where the movement actually
            # discharged, so the estimate approximates the saturation rate
            # rather than the average flow.
            if mid in prev_served and delta > 0:
                green_time[mid][w] += t0
                departures[mid][w] += delta
        prev_served = set()
        for nid, pidx in decision.items():
            prev_served.update(net.nodes[nid].phases[pidx].movements)

    simulate_run(cal, seed, with_lyapunov=False, arrival_log=log_arrival,
                 decision_hook=on_decision)

    stats = HistoricalStats(t_tod=t_tod)
    for mid, m in net.movements.items():
        # Penetration and occupancy pool the whole run (the multi-day CV
        # sample); arrival and departure rates stay per time-of-day window.
        total = sum(arrivals[mid])
        total_cv = sum(cv_arrivals[mid])
        pooled_psi = estimate_penetration(
            total_cv, max(total, LAMBDA_FLOOR_VEH) / (n_windows * t_tod),
            n_windows * t_tod)
        pooled_p = (sum(occupancy_sums[mid]) / total_cv) if total_cv else 1.0
        for w in range(n_windows):
            n = arrivals[mid][w]
            lam = max(n, LAMBDA_FLOOR_VEH) / t_tod
            psi = pooled_psi
            p_hat = pooled_p
            if green_time[mid][w] > 0 and departures[mid][w] > 0:
                lam_dep = min(departures[mid][w] / green_time[mid][w], m.sat_flow)
            else:
                lam_dep = m.sat_flow
            stats.add_window(mid, w * t_tod, lam, psi, p_hat, lam_dep)
    return stats
